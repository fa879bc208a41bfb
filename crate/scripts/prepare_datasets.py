#!/usr/bin/env python3
"""Convert the Vowel and Satimage benchmarks into the CSV layout read by `dssfn`.

Output (one sample per line, features first, integer class label last, no header):

    data/vowel_train.csv      528 x (10 + 1)
    data/vowel_test.csv       462 x (10 + 1)
    data/satimage_train.csv  4435 x (36 + 1)
    data/satimage_test.csv   2000 x (36 + 1)

Sources are PyPI wheels that bundle the original files, so only a package
index is needed:

  * keel_ds: KEEL copy of the Deterding vowel data. Column 0 is the
    train/test flag, columns 1-2 are speaker and sex (dropped), then the 10
    features and the class.
  * imbalanced_databases: the Statlog `sat.trn` / `sat.tst` files. Labels
    {1,2,3,4,5,7} are remapped to 0..5.
"""
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "data")


def fetch(package, dest):
    subprocess.check_call(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", dest, package]
    )
    (wheel,) = glob.glob(os.path.join(dest, package.replace("-", "_") + "-*.whl"))
    return zipfile.ZipFile(wheel)


def write(name, rows):
    path = os.path.join(OUT, name)
    with open(path, "w", newline="\n") as f:
        for row in rows:
            f.write(",".join(row) + "\n")
    print(f"wrote {path} ({len(rows)} rows)")


def vowel(tmp):
    z = fetch("keel-ds", tmp)
    lines = z.read("keel_ds/data/balanced/raw/vowel.dat").decode().split()
    train, test = [], []
    for line in lines:
        f = line.split(",")
        row = f[3:13] + [f[13]]
        (train if f[0] == "0" else test).append(row)
    assert len(train) == 528 and len(test) == 462
    write("vowel_train.csv", train)
    write("vowel_test.csv", test)


def satimage(tmp):
    z = fetch("imbalanced-databases", tmp)
    remap = {"1": "0", "2": "1", "3": "2", "4": "3", "5": "4", "7": "5"}
    for split, name, count in [("trn", "train", 4435), ("tst", "test", 2000)]:
        text = z.read(f"imbalanced_databases/data/satimage/sat.{split}.txt").decode()
        rows = []
        for line in text.splitlines():
            f = line.split()
            if not f:
                continue
            rows.append(f[:36] + [remap[f[36]]])
        assert len(rows) == count
        write(f"satimage_{name}.csv", rows)


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        vowel(tmp)
        satimage(tmp)
