import sys

from amup.harness.cli import main

sys.exit(main())
