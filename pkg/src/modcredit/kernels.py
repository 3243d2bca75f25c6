"""Numeric kernel backend, chosen at import.

The compiled extension ``modcredit._kernels`` is used when it was built;
otherwise, or when ``MODCREDIT_PURE=1`` is set, the numpy versions in
``modcredit._kernels_py`` are used.  ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py as pure

if os.environ.get("MODCREDIT_PURE", "") not in ("", "0"):
    impl = pure
else:
    try:
        from . import _kernels as impl  # type: ignore[attr-defined]
    except ImportError:
        impl = pure

BACKEND = "compiled" if impl is not pure else "python"

stack_forward = impl.stack_forward
stack_backward = impl.stack_backward
adam_update = impl.adam_update
gae = impl.gae
