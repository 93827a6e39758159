import sys

from tetta.cli import main

sys.exit(main())
