import sys

from tomformer.cli import main

sys.exit(main())
