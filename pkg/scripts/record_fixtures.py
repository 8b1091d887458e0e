"""Re-record the committed LLM fixtures from the scripted offline responder.

    python scripts/record_fixtures.py
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import support  # noqa: E402


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        counts = support.record_all(Path(tmp))
    for name, n in counts.items():
        print(f"{name}: {n} entries")
    return 0


if __name__ == "__main__":
    sys.exit(main())
