"""Hot-kernel dispatch: compiled ``_speedups`` when importable, numpy otherwise.

Set ``TABBENCH_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from tabbench import _purepy

BACKEND = "python"
_impl = _purepy

if not os.environ.get("TABBENCH_PURE_PYTHON"):
    try:
        from tabbench import _speedups as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _purepy

midranks = _impl.midranks
auc_binary = _impl.auc_binary
scatter_add_rows = _impl.scatter_add_rows
parzen_logpdf = _impl.parzen_logpdf
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward

__all__ = ["BACKEND", "midranks", "auc_binary", "scatter_add_rows", "parzen_logpdf", "attention_forward",
           "attention_backward"]
