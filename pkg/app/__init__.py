"""rotset — reference-based rotation estimation with a set transformer.

Math runs single-threaded so that forward passes, training runs and
checkpoints are bitwise reproducible; the BLAS pools are pinned here,
before numpy is first imported anywhere in the package.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "1.0.0"
