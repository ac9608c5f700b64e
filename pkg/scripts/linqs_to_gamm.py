#!/usr/bin/env python3
"""Convert a LINQS-style citation dataset (``<name>.content`` / ``<name>.cites``) to a gamm dataset directory.

Nodes keep the order of the content file, class names are mapped to
integers in sorted order, citations become deduplicated undirected edges
and citations to unknown papers are dropped.
"""

import argparse
import json
import logging
from pathlib import Path

logger = logging.getLogger("linqs_to_gamm")


def convert(content: Path, cites: Path, out: Path, name: str) -> dict:
    ids, rows, classes = [], [], []
    with open(content) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                ids.append(parts[0])
                rows.append(parts[1:-1])
                classes.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    class_names = sorted(set(classes))
    class_id = {c: k for k, c in enumerate(class_names)}

    edges, dropped = set(), 0
    with open(cites) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = index.get(parts[0]), index.get(parts[1])
            if a is None or b is None:
                dropped += 1
            elif a != b:
                edges.add((min(a, b), max(a, b)))

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.tsv", "w") as fh:
        fh.writelines(f"{i}\t{j}\n" for i, j in sorted(edges))
    with open(out / "features.csv", "w") as fh:
        fh.writelines(",".join(r) + "\n" for r in rows)
    with open(out / "labels.txt", "w") as fh:
        fh.writelines(f"{class_id[c]}\n" for c in classes)
    meta = {
        "name": name,
        "n": len(ids),
        "d": len(rows[0]) if rows else 0,
        "num_classes": len(class_names),
        "class_names": class_names,
        "source": f"{content.name}, {cites.name}",
        "dropped_citations": dropped,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info("%d nodes, %d edges, %d dropped citations", len(ids), len(edges), dropped)
    return meta


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("content", type=Path)
    parser.add_argument("cites", type=Path)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--name", default="cora")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    convert(args.content, args.cites, args.out, args.name)


if __name__ == "__main__":
    main()
