import sys

from pooled_corr.cli import main


if __name__ == "__main__":
    sys.exit(main())
