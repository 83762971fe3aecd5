import sys

from pmc_volatility.cli import main

sys.exit(main())
