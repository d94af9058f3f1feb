import sys

from . import cli_main


def main() -> int:
    return cli_main(["ramseg", *sys.argv[1:]])


if __name__ == "__main__":
    sys.exit(main())
