"""Question decomposition for multi-hop retrieval-augmented QA.

A small decomposer model splits a question into ``### Q<t>:`` sub-questions,
a reader model answers each against retrieved passages, and the final
answer is scored into a reward used to build SFT and DPO datasets.
"""

__version__ = "0.1.0"
