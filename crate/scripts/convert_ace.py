"""Convert OneIE-style ACE sentence JSON lines to sentence JSONL.

Trigger `end` in the input is exclusive; the output span end is inclusive.
"""

import argparse
import json

from common import record, write_jsonl, write_ontology


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--ontology-out")
    args = p.parse_args()
    out, types = [], set()
    with open(args.input, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            s = json.loads(line)
            mentions = []
            for ev in s.get("event_mentions", []):
                trig = ev["trigger"]
                mentions.append((ev["event_type"], trig["start"], trig["end"] - 1))
                types.add(ev["event_type"])
            out.append(record(s["sent_id"], s["tokens"], mentions, s.get("doc_id")))
    write_jsonl(args.output, out)
    if args.ontology_out:
        write_ontology(args.ontology_out, types)
    print(f"{len(out)} sentences, {len(types)} types")


if __name__ == "__main__":
    main()
