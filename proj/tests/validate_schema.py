#!/usr/bin/env python3
"""Validate dumped API responses against docs/api-schema.json.

Each file in the response directory is named <def>.<n>.json and is checked
against $defs/<def>. Exits non-zero on the first invalid body or when the
directory holds no responses.
"""
import json
import pathlib
import sys

import jsonschema


def main() -> int:
    if len(sys.argv) != 3:
        print("usage: validate_schema.py SCHEMA RESPONSE_DIR", file=sys.stderr)
        return 2
    schema = json.loads(pathlib.Path(sys.argv[1]).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    files = sorted(pathlib.Path(sys.argv[2]).glob("*.json"))
    if not files:
        print("no responses found", file=sys.stderr)
        return 1
    seen = set()
    for f in files:
        name = f.name.split(".")[0]
        if name not in schema["$defs"]:
            print(f"{f.name}: no schema named {name}", file=sys.stderr)
            return 1
        sub = {"$ref": f"#/$defs/{name}", "$defs": schema["$defs"]}
        try:
            jsonschema.validate(json.loads(f.read_text()), sub, cls=jsonschema.Draft202012Validator)
        except jsonschema.ValidationError as e:
            print(f"{f.name}: {e.message} at {list(e.absolute_path)}", file=sys.stderr)
            return 1
        seen.add(name)
    print(f"validated {len(files)} responses ({', '.join(sorted(seen))})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
