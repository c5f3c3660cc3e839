from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

from mixedprefix.corpus.types import Corpus, Example
from mixedprefix.errors import CorpusFormatError
from mixedprefix.prefix.schema import FeatureSchema
from mixedprefix.utils.files import atomic_write_text
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.corpus.ingest")

MissingPolicy = Literal["error", "star"]


def _record_words(record: dict, line_no: int) -> tuple[str, ...]:
    if "text" in record:
        if not isinstance(record["text"], str):
            raise CorpusFormatError(f"line {line_no}: 'text' must be a string", {"line": line_no})
        return tuple(record["text"].split())
    if "tokens" in record:
        toks = record["tokens"]
        if not isinstance(toks, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in toks):
            raise CorpusFormatError(f"line {line_no}: 'tokens' must be a list of integers", {"line": line_no})
        return tuple(str(t) for t in toks)
    raise CorpusFormatError(f"line {line_no}: record needs 'text' or 'tokens'", {"line": line_no})


def ingest_jsonl(
    path: Path,
    schema: Union[FeatureSchema, Sequence[str]],
    missing: MissingPolicy = "error",
) -> Corpus:
    """
    Read one record per line: `text` (string) or `tokens` (integer list)
    plus a `features` map. Against a frozen schema, values it does not know
    mark the example unseen.
    """
    path = Path(path)
    features = schema.features if isinstance(schema, FeatureSchema) else list(schema)
    frozen_schema = schema if isinstance(schema, FeatureSchema) and schema.frozen else None
    examples: list[Example] = []
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record: Any = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: {exc.msg}", {"line": line_no, "path": str(path)}) from exc
            if not isinstance(record, dict):
                raise CorpusFormatError(f"line {line_no}: record must be a JSON object", {"line": line_no})
            words = _record_words(record, line_no)
            raw = record.get("features", {})
            if not isinstance(raw, dict):
                raise CorpusFormatError(f"line {line_no}: 'features' must be an object", {"line": line_no})
            values: dict[str, Optional[str]] = {}
            for feat in features:
                value = raw.get(feat)
                if value is None:
                    if missing == "error":
                        raise CorpusFormatError(
                            f"line {line_no}: missing feature '{feat}'", {"line": line_no, "feature": feat}
                        )
                    values[feat] = None
                else:
                    values[feat] = str(value)
            unseen = frozen_schema is not None and any(
                v is not None and not frozen_schema.is_known(k, v) for k, v in values.items()
            )
            examples.append(Example(words, values, unseen))
    if not examples:
        log.warning("corpus %s is empty", path)
    return Corpus(examples, list(features), {"kind": "jsonl", "path": str(path)})


def save_jsonl(corpus: Corpus, path: Path) -> Path:
    lines = [
        json.dumps({"text": ex.text, "features": {k: v for k, v in ex.features.items() if v is not None}}, ensure_ascii=False, sort_keys=True)
        for ex in corpus
    ]
    return atomic_write_text(Path(path), "".join(line + "\n" for line in lines))
