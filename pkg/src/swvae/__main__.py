import sys

from swvae.cli import main

sys.exit(main())
