"""Render the saliency AUC table from a JSON fixture (defaults to the test fixture)."""

import argparse
import json
from pathlib import Path

from lgcontrast.evaluation import MetricsReport

DEFAULT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "saliency_table.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("fixture", nargs="?", default=str(DEFAULT))
    a = ap.parse_args()
    fx = json.loads(Path(a.fixture).read_text())
    print(MetricsReport("saliency", fx["columns"], fx["rows"], row_header=fx["row_header"]).table(), end="")


if __name__ == "__main__":
    main()
