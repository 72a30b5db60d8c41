# isofit_cli.py
"""Entry point: python isofit_cli.py <command> CONFIG [--seed N] [--out DIR] [--iters N] [--chart]"""
from isofit.cli import main

if __name__ == "__main__":
    main()
