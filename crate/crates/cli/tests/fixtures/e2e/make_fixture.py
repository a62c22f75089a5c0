"""Builds the end-to-end fixture and its golden outputs.

Inputs are six tiny page images, scripted descriptions, and scripted embedding
vectors. The vectors are dyadic, so every cosine score below is exact in binary
floating point. The golden run and report are computed here from first
principles and never by the Rust code under test.

    python3 make_fixture.py
"""
import json
import math
from pathlib import Path

from PIL import Image, ImageDraw

HERE = Path(__file__).parent
TAG = "fixture-vlm+fixture-encoder"
TOP_K = 10
CUTOFFS = [1, 5, 10]

DESCRIPTIONS = {
    "d1": "Summary: quarterly revenue table. Revenue rose 12% to 4.2M EUR.",
    "d2": "Summary: company overview. Offices in Lyon, Porto and Graz; 310 staff.",
    "d3": "Summary: emissions chart. Scope 1 emissions fell from 820 t to 640 t.",
    "d4": "Summary: board composition. Seven members, three independent.",
    "d5": "Summary: water usage. 14,300 m3 consumed across 52 restaurants.",
    "d6": "Summary: supplier audit results. 96% of suppliers passed the audit.",
}

# Unit directions; the wire vectors are scaled by a power of two.
DOC_UNIT = {
    "d1": [1, 0, 0, 0],
    "d2": [0.5, 0.5, 0.5, 0.5],
    "d3": [0, 1, 0, 0],
    "d4": [0.5, -0.5, 0.5, -0.5],
    "d5": [0, 0, 1, 0],
    "d6": [0.5, 0.5, -0.5, -0.5],
}
DOC_SCALE = {"d1": 2, "d2": 4, "d3": 0.5, "d4": 8, "d5": 1, "d6": 2}

QUERIES = {
    "q1": ("How much did revenue grow?", [1, 0, 0, 0], 4),
    "q2": ("What are the company's environmental indicators?", [0.5, 0.5, 0.5, 0.5], 2),
    "q3": ("Did suppliers pass the audit?", [0, 0, 0, 1], 0.25),
    "q4": ("How much water do the restaurants use?", [0, 0, 1, 0], 16),
}

QRELS = [("q1", "d1", 2), ("q1", "d4", 1), ("q2", "d3", 1), ("q2", "d5", 1), ("q3", "d6", 1), ("q4", "d5", 1), ("q4", "d2", 0)]

COLORS = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085"]


def make_images():
    for i, doc in enumerate(DESCRIPTIONS):
        path = HERE / f"{doc}.png"
        if path.exists():
            continue
        img = Image.new("RGB", (32, 24), "white")
        draw = ImageDraw.Draw(img)
        draw.rectangle([2, 2, 29, 6], fill=COLORS[i])
        for row in range(3):
            draw.line([2, 10 + 4 * row, 6 + 7 * ((i + row) % 4), 10 + 4 * row], fill="black")
        img.save(path, optimize=False)


def scaled(unit, s):
    return [x * s for x in unit]


def write_inputs():
    with open(HERE / "corpus.jsonl", "w") as f:
        for doc in DESCRIPTIONS:
            f.write(json.dumps({"_id": doc, "image_path": f"{doc}.png"}) + "\n")
    with open(HERE / "queries.jsonl", "w") as f:
        for qid, (text, _, _) in QUERIES.items():
            f.write(json.dumps({"_id": qid, "text": text}) + "\n")
    with open(HERE / "qrels.tsv", "w") as f:
        f.write("query-id\tcorpus-id\tscore\n")
        for q, d, r in QRELS:
            f.write(f"{q}\t{d}\t{r}\n")
    vectors = {DESCRIPTIONS[d]: scaled(u, DOC_SCALE[d]) for d, u in DOC_UNIT.items()}
    vectors.update({text: scaled(u, s) for text, u, s in QUERIES.values()})
    script = {"descriptions": DESCRIPTIONS, "vectors": vectors}
    (HERE / "mock_script.json").write_text(json.dumps(script, indent=2) + "\n")


def normalize(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def fmt_score(x):
    if x == 0:
        x = 0.0
    s = repr(x)
    assert "e" not in s
    if s.endswith(".0"):
        s = s[:-2]
    digits = s.lstrip("-").replace(".", "")
    sig = len(digits.lstrip("0")) or max(len(digits), 1)
    if sig < 6:
        if "." not in s:
            s += "."
        s += "0" * (6 - sig)
    return s


def rankings():
    docs = {d: normalize(scaled(u, DOC_SCALE[d])) for d, u in DOC_UNIT.items()}
    out = {}
    for qid, (_, u, s) in QUERIES.items():
        q = normalize(scaled(u, s))
        scored = [(d, sum(a * b for a, b in zip(q, v))) for d, v in docs.items()]
        scored.sort(key=lambda x: (-x[1], x[0]))
        out[qid] = scored[:TOP_K]
    return out


def write_golden_run(runs):
    with open(HERE / "golden.run", "w") as f:
        for qid in QUERIES:
            for rank, (d, score) in enumerate(runs[qid], start=1):
                f.write(f"{qid} Q0 {d} {rank} {fmt_score(score)} {TAG}\n")


def write_golden_report(runs):
    qrels = {}
    for q, d, r in QRELS:
        qrels.setdefault(q, {})[d] = r
    per_query = []
    for q, judged in sorted(qrels.items()):
        if not any(r > 0 for r in judged.values()):
            continue
        ranked = [d for d, _ in runs.get(q, [])]
        ideal = sorted(judged.values(), reverse=True)
        relevant = {d for d, r in judged.items() if r > 0}
        row = {}
        for k in CUTOFFS:
            dcg = sum(judged.get(d, 0) / math.log2(i + 2) for i, d in enumerate(ranked[:k]))
            idcg = sum(r / math.log2(i + 2) for i, r in enumerate(ideal[:k]))
            row[f"ndcg@{k}"] = dcg / idcg
            row[f"recall@{k}"] = len(relevant & set(ranked[:k])) / len(relevant)
        per_query.append(row)
    means = {m: sum(r[m] for r in per_query) / len(per_query) for m in per_query[0]}
    report = {"datasets": {"fixture": dict(means, skipped_queries=0)}, "macro": means}
    (HERE / "golden_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def main():
    make_images()
    write_inputs()
    runs = rankings()
    write_golden_run(runs)
    write_golden_report(runs)


if __name__ == "__main__":
    main()
