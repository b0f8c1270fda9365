"""
Exception hierarchy for the marketplace language model.

Library modules raise these; main.py turns them into exit codes.
"""

from typing import Optional


class MarketplaceLMError(Exception):
    """Base exception for every error raised by this package"""
    pass


# Graph errors
class GraphError(MarketplaceLMError):
    """Base exception for graph storage and sampling errors"""
    pass


class GraphParseError(GraphError):
    """Exception raised for a malformed line in a graph file"""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class GraphValidationError(GraphError):
    """Exception raised when a graph violates a structural invariant"""
    pass


class UnknownNodeError(GraphError):
    """Exception raised when a node id is not part of the graph (or ego graph)"""

    def __init__(self, node_id: int, where: str = "graph"):
        self.node_id = node_id
        super().__init__(f"unknown node {node_id} (not in {where})")


class RelationTypeError(GraphError):
    """Exception raised when a relation does not fit a node's entity type"""
    pass


# Vocabulary errors
class VocabError(MarketplaceLMError):
    """Exception raised for token ids outside the expected vocabulary range"""
    pass


# Prompt construction
class SkipInstance(MarketplaceLMError):
    """
    Signal that a prompt instance cannot be built for this node.

    Not a failure: the trainer counts skips per reason and moves on.
    """

    def __init__(self, reason: str, detail: Optional[str] = None):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


# Model errors
class ModelError(MarketplaceLMError):
    """Base exception for model construction and forward errors"""
    pass


class ContextOverflowError(ModelError):
    """Exception raised when a prompt is longer than the model context"""

    def __init__(self, length: int, context: int):
        self.length = length
        self.context = context
        super().__init__(f"prompt of {length} tokens exceeds context length {context}")


class ShapeError(ModelError):
    """Exception raised for inconsistent tensor shapes"""
    pass


class UnknownTaskError(ModelError):
    """Exception raised for a task name with no head or labels"""
    pass


# Training
class TrainingError(MarketplaceLMError):
    """Base exception for training failures"""
    pass


class NonFiniteError(TrainingError):
    """Exception raised when a loss or gradient stops being finite"""

    def __init__(self, name: str, what: str = "gradient"):
        self.name = name
        super().__init__(f"non-finite {what} in {name}")


# Checkpoints
class CheckpointError(MarketplaceLMError):
    """Base exception for checkpoint read/write errors"""
    pass


class CheckpointVersionError(CheckpointError):
    """Exception raised for an unknown magic or manifest version"""
    pass


class CheckpointTruncatedError(CheckpointError):
    """Exception raised when a tensor payload is shorter than the manifest says"""
    pass


class CheckpointShapeError(CheckpointError):
    """Exception raised when a stored tensor does not match the expected shape"""
    pass


# Configuration
class ConfigError(MarketplaceLMError):
    """Exception raised for invalid or unknown configuration keys"""
    pass


# Evaluation
class EvaluationError(MarketplaceLMError):
    """Exception raised when a task has no prepared split or no evaluation nodes"""
    pass
