"""Selects the compiled KL kernels when built, else the numpy fallback.

Set ``LOOKBACK_PURE_PYTHON=1`` to force the fallback. ``pairwise_kl`` always
uses numpy: its matrix product runs on BLAS, which beats the compiled loop
(see benchmarks/bench_kernels.py).
"""

import os

from lookback import _pykernels

if os.environ.get("LOOKBACK_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from lookback import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

kl_rows = _impl.kl_rows
pairwise_kl = _pykernels.pairwise_kl
