#!/usr/bin/env python3
"""Writes the bundled 20-frame fixture (annotations, manifest, replay files, configs).

Degraded frames carry their true boxes at detector confidence 0.22-0.45, so a
threshold of 0.5 misses them and 0.2 keeps them. Output is deterministic.
"""
import argparse
import json
import random
from pathlib import Path

W, H = 640, 480
TAGS = [["dim"], ["mucus"], ["stool"], ["bubbles"], ["motion_blur"],
        ["dim", "motion_blur"], ["mucus", "bubbles"], ["stool"], ["dim"], ["bubbles"]]
GT_COUNTS = [1, 1, 2, 1, 0, 1, 2, 1, 1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 0, 1]


def fnv1a64(data: bytes) -> str:
    h = 0xcbf29ce484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return "fnv1a64:%016x" % h


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def place(rng, taken, size_lo=50, size_hi=110):
    while True:
        w, h = rng.randint(size_lo, size_hi), rng.randint(size_lo, size_hi)
        x, y = rng.randint(10, W - w - 10), rng.randint(10, H - h - 10)
        box = [x, y, x + w, y + h]
        if all(box[2] + 20 < t[0] or t[2] + 20 < box[0] or box[3] + 20 < t[1] or t[3] + 20 < box[1] for t in taken):
            taken.append(box)
            return box


def verdict(decision, conf, think="checked crop"):
    return "<think>%s</think><answer>[{'Decision': '%s', 'Confidence': %.2f}]</answer>" % (think, decision, conf)


def build(rng):
    annotations, detections, verifier = [], [], []
    for i in range(20):
        fid = "f%02d" % (i + 1)
        degraded = i >= 10
        taken = []
        gts = [place(rng, taken) for _ in range(GT_COUNTS[i])]
        if degraded:
            quality = {"illumination": 0.35, "clarity": 0.4, "artifacts": 0.3}
        else:
            quality = {"illumination": 0.9, "clarity": 0.85, "artifacts": 0.95}
        annotations.append({
            "frame_id": fid, "patient_id": "p%d" % (i % 6 + 1), "width": W, "height": H,
            "image": "images/%s.png" % fid, "condition": "degraded" if degraded else "clean",
            "tags": TAGS[i - 10] if degraded else [], "quality": quality, "boxes": gts,
        })
        boxes = []
        for k, g in enumerate(gts):
            dx, dy = rng.randint(-8, 8), rng.randint(-8, 8)
            box = [g[0] + dx, g[1] + dy, g[2] + dx, g[3] + dy]
            box = [max(0, box[0]), max(0, box[1]), min(W, box[2]), min(H, box[3])]
            if degraded and not (i == 15 and k == 0):
                conf = round(rng.uniform(0.22, 0.45), 2)
            else:
                conf = round(rng.uniform(0.62, 0.95), 2)
            boxes.append((box, conf, True))
        for _ in range(1 if i % 3 else 2):
            box = place(rng, taken, 40, 80)
            conf = round(rng.uniform(0.21, 0.48) if degraded else rng.uniform(0.05, 0.45), 2)
            boxes.append((box, conf, False))
        detections.append({"frame_id": fid, "width": W, "height": H, "boxes": [
            {"x1": b[0], "y1": b[1], "x2": b[2], "y2": b[3], "conf": c} for b, c, _ in boxes]})

        verifier.append({"frame_id": fid, "adverse": degraded, "quality": quality})
        for j, (b, c, positive) in enumerate(boxes):
            if positive:
                raw = verdict("Yes", round(rng.uniform(0.8, 0.95), 2), "polyp boundary visible")
            else:
                raw = verdict("No", round(rng.uniform(0.8, 0.9), 2), "mucosal fold")
            if fid == "f14" and not positive:
                raw = verdict("Yes", 0.78, "looks like a sessile lesion")
            if fid == "f17" and positive:
                raw = verdict("Yes", 0.55, "uncertain under blur")
            if fid == "f12" and positive and j == 1:
                raw = "<think>bubbles obscure the crop</think><answer>[{'Decision': 'Maybe', 'Confidence': 0.5}]</answer>"
            if fid == "f03" and positive and j == 0:
                raw = '<think>clear</think><answer>[{"Decision": "yes", "Confidence": 0.93}]</answer>'
            verifier.append({"frame_id": fid, "crop": b, "raw_response": raw})
    return annotations, detections, verifier


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "golden"))
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    annotations, detections, verifier = build(random.Random(args.seed))

    ann_text = "".join(dumps(a) + "\n" for a in annotations)
    (out / "annotations.jsonl").write_text(ann_text)
    (out / "manifest.json").write_text(json.dumps(
        {"annotations": "annotations.jsonl", "checksum": fnv1a64(ann_text.encode()), "split": "eval"}, indent=2) + "\n")
    (out / "detector.jsonl").write_text("".join(dumps(d) + "\n" for d in detections))
    partial = [d if d["frame_id"] != "f13" else {"frame_id": "f13", "error": "detector timed out"} for d in detections]
    (out / "detector_partial.jsonl").write_text("".join(dumps(d) + "\n" for d in partial))
    (out / "verifier.jsonl").write_text("".join(dumps(v) + "\n" for v in verifier))

    base = {"dataset": "manifest.json",
            "backend": {"detector_file": "detector.jsonl", "verifier": "replay", "verifier_file": "verifier.jsonl"},
            "seed": 0}
    variants = {
        "config.json": base,
        "config_partial.json": {**base, "backend": {**base["backend"], "detector_file": "detector_partial.jsonl"}},
        "config_oracle.json": {**base, "backend": {**base["backend"], "verifier": "oracle"}},
    }
    for name, cfg in variants.items():
        (out / name).write_text(json.dumps(cfg, indent=2) + "\n")


if __name__ == "__main__":
    main()
