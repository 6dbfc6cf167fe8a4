"""Module entry point so ``python -m depthloc`` behaves like the console script."""

from .cli import entrypoint

if __name__ == "__main__":
    entrypoint()
