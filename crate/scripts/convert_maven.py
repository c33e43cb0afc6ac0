"""Convert MAVEN document files (train.jsonl / valid.jsonl) to sentence JSONL.

Sentences without events go to --null-out when given, otherwise they are
kept in the main output with no mentions.
"""

import argparse
import json

from common import record, write_jsonl, write_ontology


def convert(path, keep_types=None):
    events, nulls, types = [], [], set()
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            doc = json.loads(line)
            per_sent = {i: [] for i in range(len(doc["content"]))}
            for event in doc.get("events", []):
                if keep_types is not None and event["type"] not in keep_types:
                    continue
                types.add(event["type"])
                for m in event["mention"]:
                    start, end = m["offset"]
                    per_sent[m["sent_id"]].append((event["type"], start, end - 1))
            for i, sent in enumerate(doc["content"]):
                r = record(f"{doc['id']}-{i}", sent["tokens"], per_sent[i], doc["id"])
                (events if per_sent[i] else nulls).append(r)
    return events, nulls, types


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--null-out")
    p.add_argument("--ontology-out")
    p.add_argument("--types", help="file with one event type per line to keep")
    args = p.parse_args()
    keep = None
    if args.types:
        with open(args.types, encoding="utf-8") as f:
            keep = {line.strip() for line in f if line.strip()}
    events, nulls, types = convert(args.input, keep)
    if args.null_out:
        write_jsonl(args.output, events)
        write_jsonl(args.null_out, nulls)
    else:
        write_jsonl(args.output, events + nulls)
    if args.ontology_out:
        write_ontology(args.ontology_out, types)
    print(f"{len(events)} event sentences, {len(nulls)} NULL sentences, {len(types)} types")


if __name__ == "__main__":
    main()
