"""
Gradient Check Module

Compares tape gradients against central finite differences on a random
subsample of coordinates of every parameter tensor, or on chosen
coordinates.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tensor, no_grad
from errors import ModelError
from prompts import BiasMatrix, LossSpace, PromptInstance
from transformer import ParameterStore


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a| + |n|, 1e-5)."""
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-5)


@dataclass
class TensorCheck:
    name: str
    n_checked: int
    max_rel_error: float
    frozen: bool = False


@dataclass
class GradCheckReport:
    entries: List[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        checked = [e.max_rel_error for e in self.entries if not e.frozen]
        return max(checked) if checked else 0.0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance

    def worst(self) -> Optional[TensorCheck]:
        checked = [e for e in self.entries if not e.frozen]
        return max(checked, key=lambda e: e.max_rel_error) if checked else None


def gradient_check(params: ParameterStore, loss_fn: Callable[[], Tensor], epsilon: float = 1e-5,
                   n_coords: int = 6, seed: int = 0,
                   names: Optional[Sequence[str]] = None,
                   coords: Optional[Mapping[str, Sequence[int]]] = None) -> GradCheckReport:
    """
    Check analytic gradients of ``loss_fn`` against central differences.

    Frozen tensors are listed with zero applied gradient and are not perturbed.

    Args:
        params: 64-bit parameter store
        loss_fn: Zero-argument callable building the scalar loss from params
        epsilon: Finite-difference step
        n_coords: Coordinates sampled per tensor
        seed: Sampling seed
        names: Tensors to check (default: all, or the keys of ``coords``)
        coords: Flat coordinates to check for some tensors instead of a sample

    Returns:
        GradCheckReport with one entry per tensor

    Raises:
        ModelError: If the store is not in 64-bit precision
    """
    if params.config.precision != 64:
        raise ModelError("gradient checks need 64-bit precision")
    coords = dict(coords or {})
    if names is None:
        names = list(coords) if coords else params.names()

    params.zero_grad()
    loss_fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name in names:
        tensor = params[name]
        if name in params.frozen:
            report.entries.append(TensorCheck(name=name, n_checked=0, max_rel_error=0.0, frozen=True))
            continue

        flat = tensor.data.reshape(-1)
        if name in coords:
            chosen = np.asarray(coords[name], dtype=np.int64)
        else:
            chosen = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        worst = 0.0
        for coord in chosen:
            original = flat[coord]
            with no_grad():
                flat[coord] = original + epsilon
                plus = loss_fn().item()
                flat[coord] = original - epsilon
                minus = loss_fn().item()
            flat[coord] = original
            numeric = (plus - minus) / (2 * epsilon)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[coord]), numeric))
        report.entries.append(TensorCheck(name=name, n_checked=len(chosen), max_rel_error=worst))
    return report


def tied_head_coords(params: ParameterStore,
                     instances: Sequence[Tuple[PromptInstance, Optional[BiasMatrix]]],
                     n_coords: int = 4, seed: int = 0, max_rows: int = 3) -> Dict[str, List[int]]:
    """
    Flat Z coordinates of node rows that reach the loss twice with tied heads.

    A node token shown in a prompt whose targets are nodes of the same entity
    type is read once as an input embedding and once as a row of the output
    head; both contributions accumulate into the same Z row.

    Returns:
        ``{"Z": [...]}``, empty when no such row exists or heads are untied
    """
    if not params.config.tie_heads:
        return {}
    n_members = params.layout.n_members
    rows = set()
    for instance, _ in instances:
        if instance.loss_space not in (LossSpace.MEMBER_ONLY, LossSpace.JOB_ONLY):
            continue
        wants_member = instance.loss_space is LossSpace.MEMBER_ONLY
        for node_id, is_node in zip(instance.node_assoc, instance.is_node):
            if is_node and node_id is not None and (node_id <= n_members) == wants_member:
                rows.add(node_id - 1)
    if not rows:
        return {}

    d = params["Z"].shape[1]
    rng = np.random.default_rng(seed)
    picked = sorted(rows)[:max_rows]
    flat = [row * d + int(col) for row in picked
            for col in rng.choice(d, size=min(n_coords, d), replace=False)]
    return {"Z": flat}
