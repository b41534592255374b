#!/usr/bin/env python3
"""Write the California Housing dataset in the on-disk layout consumed by `tabr`.

The raw table is taken from scikit-learn's fetcher when it can reach the network,
otherwise from the parquet copy bundled inside the `pytorch-widedeep` wheel.
The split follows the usual 64/16/20 protocol: 20% test, then 20% of the rest
for validation (13209 / 3303 / 4128 rows).

Usage: python3 scripts/fetch_california.py [OUT_DIR] [--seed 0]
"""
import argparse
import glob
import io
import os
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def load_frame():
    try:
        from sklearn.datasets import fetch_california_housing

        d = fetch_california_housing(as_frame=True)
        df = d.frame
        return df[list(d.feature_names)].to_numpy(), df[d.target_names[0]].to_numpy()
    except Exception as exc:  # offline
        print(f"sklearn fetch failed ({exc}); falling back to pytorch-widedeep wheel", file=sys.stderr)
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--timeout", "120",
             "-q", "pytorch-widedeep==1.7.0", "-d", tmp],
            check=True,
        )
        wheel = glob.glob(os.path.join(tmp, "*.whl"))[0]
        raw = zipfile.ZipFile(wheel).read("pytorch_widedeep/datasets/data/california_housing.parquet.brotli")
    df = pd.read_parquet(io.BytesIO(raw))
    return df.drop(columns=["MedHouseVal"]).to_numpy(), df["MedHouseVal"].to_numpy()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default=os.path.join(os.path.dirname(__file__), "..", "data", "california"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    X, y = load_frame()
    n = len(y)
    assert X.shape == (20640, 8), X.shape

    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(n)
    n_test = int(np.ceil(0.2 * n))
    n_val = int(np.ceil(0.2 * (n - n_test)))
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test:n_test + n_val])
    train = np.sort(perm[n_test + n_val:])

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "meta.txt"), "w") as f:
        f.write(f"task=regression\nn={n}\n")
    np.savetxt(os.path.join(args.out, "X_num.csv"), X, delimiter=",", fmt="%.10g")
    np.savetxt(os.path.join(args.out, "Y.csv"), y, fmt="%.10g")
    for name, idx in (("train", train), ("val", val), ("test", test)):
        np.savetxt(os.path.join(args.out, f"idx_{name}.txt"), idx, fmt="%d")
    print(f"wrote {args.out}: train={len(train)} val={len(val)} test={len(test)}")


if __name__ == "__main__":
    main()
