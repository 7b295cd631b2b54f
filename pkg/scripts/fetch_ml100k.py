"""Fetch the MovieLens-100K ratings when grouplens.org is not reachable.

The recbole wheel on PyPI ships the ratings as an atomic .inter file; this
strips its header and writes the usual tab-separated u.data layout.

    python scripts/fetch_ml100k.py --out data/ml-100k/u.data
"""
import argparse
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k/u.data")
    ap.add_argument("--wheel", help="use an already downloaded recbole wheel")
    args = ap.parse_args()

    wheel = args.wheel
    if wheel is None:
        tmp = tempfile.mkdtemp()
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp,
                        "recbole==1.2.1"], check=True)
        wheel = glob.glob(os.path.join(tmp, "recbole-*.whl"))[0]
    with zipfile.ZipFile(wheel) as zf:
        lines = zf.read(MEMBER).decode().splitlines()
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        for line in lines[1:]:  # header: user_id:token item_id:token rating:float timestamp:float
            if line.strip():
                fh.write(line + "\n")
    print(f"wrote {len(lines) - 1} ratings to {args.out}")


if __name__ == "__main__":
    main()
