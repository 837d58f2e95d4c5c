"""Counterfactual rationale extraction and training on small synthetic tasks.

Submodules: ``autograd`` (reverse-mode kernel), ``sparsemap`` (budgeted
structured sparsity), ``rationalizer``, ``editor``, ``generation``,
``agreement``, ``metrics``, ``corpus``, ``checkpoint`` and ``cli``.
"""

__version__ = "0.1.0"
