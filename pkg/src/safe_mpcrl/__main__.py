import sys

from safe_mpcrl.cli import main

if __name__ == "__main__":
    sys.exit(main())
