"""Procedure-mention normalization: candidate recall, keyword-attentive
ranking and score fusion against a coded terminology knowledge base."""

from .corpus import KnowledgeBase, MentionRecord, Terminology, load_corpus, load_kb
from .fusion import FusionConfig, NormalizationResult
from .pipeline import Pipeline

__all__ = [
    "FusionConfig",
    "KnowledgeBase",
    "MentionRecord",
    "NormalizationResult",
    "Pipeline",
    "Terminology",
    "load_corpus",
    "load_kb",
]
__version__ = "0.1.0"
