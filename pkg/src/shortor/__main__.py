import sys

from shortor.cli import main

sys.exit(main())
