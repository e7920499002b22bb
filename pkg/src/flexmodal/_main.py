"""Console-script entry point.

BLAS thread counts are pinned to one before numpy loads so repeated CLI runs
produce byte-identical outputs regardless of the machine's thread
configuration.  Library users who import flexmodal directly keep whatever
threading they have configured.
"""

import os
import sys

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ[_var] = "1"


def main() -> int:
    from flexmodal.cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
