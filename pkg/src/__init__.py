"""
Marketplace Graph LM - Graph-Prompted Language Model for Job Marketplaces

Tokenizes members and jobs as vocabulary extensions, learns their embeddings
from ego-graph prompts with metapath-based structural objectives and a
proximity-aware attention bias, then finetunes for node classification and
link prediction on synthetic marketplaces with planted structure.
"""

__version__ = "0.1.0"
