"""modnet: a desk-scale workbench for multilingual translation architectures.

Compares three ways of serving many translation directions - dedicated
per-direction models, one fully shared model, and per-language modules wired
together through a shared representation space - under controlled data
divisions, multi-way training schedules, incremental language addition and
zero-shot evaluation.
"""

__version__ = "0.1.0"
