"""Shared helpers for the corpus converters."""

import json
import re


def default_verbalizer(type_name):
    leaf = re.split(r"[:.]", type_name)[-1]
    return leaf.lower().replace("-", "_").replace(" ", "_")


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def write_ontology(path, type_names):
    types = [{"name": t, "verbalizers": [default_verbalizer(t)]} for t in sorted(type_names)]
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"null_verbalizer": "none", "types": types}, f, indent=2, ensure_ascii=False)
        f.write("\n")


def record(sent_id, tokens, mentions, doc_id=None):
    r = {"id": sent_id, "tokens": tokens}
    if doc_id is not None:
        r["doc_id"] = doc_id
    r["mentions"] = [{"type": t, "start": s, "end": e} for t, s, e in sorted(mentions, key=lambda m: (m[1], m[2], m[0]))]
    return r
