import sys

from rfattn.bench.cli import main

sys.exit(main())
