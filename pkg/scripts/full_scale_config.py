"""Write the full-width configuration (400x400 inputs, base width 64, depth 4) as JSON for the CLI.

    python3 scripts/full_scale_config.py configs/full.json
    symseg preprocess --input /data/covid --out cache/covid
    symseg run --config configs/full.json --manifest cache/covid --out runs/full --with-baseline
"""
import sys
from pathlib import Path

from symseg.config import SymSegConfig


def main():
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    path = Path(sys.argv[1])
    path.parent.mkdir(parents=True, exist_ok=True)
    SymSegConfig().save(path)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
