import sys

from fp8train.cli import main

sys.exit(main())
