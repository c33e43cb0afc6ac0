"""Convert the FewEvent JSON (event type -> list of instances) to sentence JSONL.

Each instance is either [sentence, trigger] strings, in which case the
sentence is split on whitespace and the first token run equal to the
trigger is the span, or an object with `tokens` and an inclusive
`trigger` [start, end]. Instances whose trigger cannot be located are
reported and skipped.
"""

import argparse
import json
import sys

from common import record, write_jsonl, write_ontology


def locate(tokens, trigger):
    words = trigger.split()
    for i in range(len(tokens) - len(words) + 1):
        if [t.lower() for t in tokens[i : i + len(words)]] == [w.lower() for w in words]:
            return i, i + len(words) - 1
    return None


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--ontology-out")
    args = p.parse_args()
    with open(args.input, encoding="utf-8") as f:
        data = json.load(f)
    out, skipped = [], 0
    for event_type in sorted(data):
        for n, inst in enumerate(data[event_type]):
            if isinstance(inst, dict):
                tokens = inst["tokens"]
                span = tuple(inst["trigger"])
            else:
                tokens = inst[0].split()
                span = locate(tokens, inst[1])
            if span is None:
                skipped += 1
                continue
            out.append(record(f"{event_type}-{n}", tokens, [(event_type, span[0], span[1])]))
    write_jsonl(args.output, out)
    if args.ontology_out:
        write_ontology(args.ontology_out, data.keys())
    if skipped:
        print(f"skipped {skipped} instances with no locatable trigger", file=sys.stderr)
    print(f"{len(out)} sentences, {len(data)} types")


if __name__ == "__main__":
    main()
