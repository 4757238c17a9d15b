"""
RDRec - Rationale Distillation Recommender
Distills user preferences and item attributes from reviews with a large LM,
then trains a compact text-to-text recommender on them.
"""

__version__ = "1.0.0"
