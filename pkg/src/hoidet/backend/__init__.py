"""Numerical kernel backend selection.

The hot inner loops (row softmax, layer norm, sigmoid/relu, the AdamW
update) exist twice: a compiled Cython extension and a pure-numpy
fallback with identical contracts. The compiled core is used when the
extension built; set ``HOIDET_BACKEND=py`` or ``HOIDET_BACKEND=c`` to
force a choice (forcing ``c`` raises if the extension is missing).
`benchmarks/bench_backends.py` compares the two.
"""

import os

_forced = os.environ.get("HOIDET_BACKEND", "").strip().lower()

if _forced in ("py", "python"):
    from . import _kernels_py as _impl

    BACKEND = "py"
elif _forced in ("", "c", "compiled"):
    try:
        from . import _kernels_c as _impl  # type: ignore[attr-defined]

        BACKEND = "c"
    except ImportError:
        if _forced:
            raise
        from . import _kernels_py as _impl

        BACKEND = "py"
else:
    raise ValueError(f"HOIDET_BACKEND must be 'c' or 'py', got {_forced!r}")

sigmoid = _impl.sigmoid
sigmoid_bwd = _impl.sigmoid_bwd
relu = _impl.relu
relu_bwd = _impl.relu_bwd
softmax_rows = _impl.softmax_rows
softmax_rows_bwd = _impl.softmax_rows_bwd
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_bwd = _impl.layer_norm_rows_bwd
adamw_update = _impl.adamw_update
