"""
app.py — Entry point for the RealMix semi-supervised training toolkit.

Run with:
    python app.py prepare --synthetic --labels 250 --out runs/l250
    python app.py train --config runs/l250/config.json --split runs/l250/split.json \
        --data runs/l250/data --out runs/l250/train
    python app.py experiment mismatch --synthetic --levels 0,50,100 --out runs/mismatch

See `python app.py <command> --help` for every flag.
"""

import sys
import os

# ── Ensure project root is on sys.path so `config` / `modules` resolve ──
_PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
if _PROJECT_ROOT not in sys.path:
    sys.path.insert(0, _PROJECT_ROOT)

from modules.cli import main


if __name__ == "__main__":
    sys.exit(main())
