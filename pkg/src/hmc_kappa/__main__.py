import sys

from hmc_kappa.cli import main

sys.exit(main())
