"""Instruction decomposition and deterministic text embeddings.

A composite instruction like "put the green ring to the left of the gray
cube and close to the red bowl" is split into an action, a source object,
and an ordered list of (referent, predicate) targets. Two backends share
that contract: a deterministic grammar and an LLM endpoint speaking the
chat-completion wire protocol (with an offline replay transport for tests).

Text is embedded with a hashed character-3-gram encoder so that referents
and predicates become fixed-size unit vectors without any model downloads.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import requests

D_TXT = 64

# The ten location relations the benchmark exercises, plus the two
# navigation-style ones that show up in demos. Multi-word entries must come
# first so longest-match wins.
PREDICATE_VOCABULARY = (
    "left above",
    "right above",
    "left below",
    "right below",
    "left",
    "right",
    "above",
    "below",
    "close",
    "far",
)
EXTRA_PREDICATES = ("front", "behind")
_ALL_PREDICATES = PREDICATE_VOCABULARY + EXTRA_PREDICATES
_PRED_FIRST_WORDS = {p.split()[0] for p in _ALL_PREDICATES}
_CONNECTORS = {"of", "from", "to"}

SELF_SOURCE = "self"


class ParseError(ValueError):
    """Grammar mismatch, pointing at the first token that failed."""

    def __init__(self, message: str, token: str | None = None, position: int = -1):
        self.token = token
        self.position = position
        if token is not None:
            message = f"{message} (token {position}: {token!r})"
        super().__init__(message)


class LlmTransportError(RuntimeError):
    """The LLM endpoint could not be reached or did not answer in time."""


class LlmSchemaError(ValueError):
    """The LLM answered, but not with the expected structured reply."""


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _U64
    return h


def _tokenize(s: str) -> list[str]:
    tokens, current = [], []
    for ch in s.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


def embed_text(s: str) -> np.ndarray:
    """Unit-norm D_TXT vector from hashed character 3-grams.

    Deterministic across runs and platforms; case and whitespace do not
    change the result.
    """
    if not s or not s.strip():
        raise ValueError("cannot embed an empty string")
    tokens = _tokenize(s)
    if not tokens:
        raise ValueError(f"no alphanumeric content in {s!r}")
    vec = np.zeros(D_TXT, dtype=float)
    for token in tokens:
        grams = (
            [token[i : i + 3] for i in range(len(token) - 2)]
            if len(token) >= 3
            else [token]
        )
        for gram in grams:
            h = _fnv1a(gram.encode("utf-8"))
            sign = 1.0 if (h >> 6) & 1 == 0 else -1.0
            vec[h % D_TXT] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # Signed buckets can cancel exactly; fall back to a deterministic
        # one-hot so the unit-norm contract always holds.
        vec[_fnv1a(tokens[0].encode("utf-8")) % D_TXT] = 1.0
        norm = 1.0
    return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParsedInstruction:
    action: str
    source: str
    targets: tuple[tuple[str, str], ...]  # (referent, predicate), in order

    def __post_init__(self):
        object.__setattr__(
            self, "targets", tuple((r, p.lower()) for r, p in self.targets)
        )


@dataclass(frozen=True)
class RelationTuple:
    """One referring expression as text plus unit-norm feature vectors."""

    ref_text: str
    pred_text: str
    f_ref: np.ndarray = field(repr=False)
    f_pred: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name, v in (("f_ref", self.f_ref), ("f_pred", self.f_pred)):
            if v.shape != (D_TXT,):
                raise ValueError(f"{name} must have shape ({D_TXT},), got {v.shape}")
            if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
                raise ValueError(f"{name} must be unit-norm")


DEFAULT_PROMPT = """You decompose a composite placement or navigation instruction into a structured form.
Reason in three steps: first identify the action verb, second identify the source object the action applies to (use "self" when the instruction moves the robot itself), third identify each target as the relational predicate plus the referenced object, keeping the order in which the phrases appear.
Reply with exactly one JSON object of the form {"action": str, "source": str, "target": [[referent, predicate], ...]} and nothing else.

Input: put the cyan bowl above the chocolate and left of the silver spoon.
Output: {"action": "put", "source": "cyan bowl", "target": [["chocolate", "above"], ["silver spoon", "left"]]}

Input: put the green ring to the left of the gray cube, the above of the gray cube, and the right of the red bowl.
Output: {"action": "put", "source": "green ring", "target": [["gray cube", "left"], ["gray cube", "above"], ["red bowl", "right"]]}

Input: move to the front of the red box and close to the tree.
Output: {"action": "move", "source": "self", "target": [["red box", "front"], ["tree", "close"]]}"""


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str
    model: str = "gpt-4"
    timeout: float = 30.0
    prompt: str = DEFAULT_PROMPT
    api_key: str | None = None

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")


# ---------------------------------------------------------------------------
# Grammar backend
# ---------------------------------------------------------------------------


def _instruction_tokens(instruction: str) -> list[str]:
    text = instruction.lower().strip()
    text = text.rstrip(".!?")
    text = text.replace(",", " , ")
    return text.split()


def _match_predicate(tokens: list[str], pos: int) -> tuple[str, int] | None:
    for pred in _ALL_PREDICATES:
        words = pred.split()
        if tokens[pos : pos + len(words)] == words:
            return pred, pos + len(words)
    return None


def _rel_phrase_starts(tokens: list[str], i: int) -> bool:
    t = tokens[i]
    if t in _PRED_FIRST_WORDS:
        return True
    if t == "to" and tokens[i + 1 : i + 2] == ["the"] and _match_predicate(tokens, i + 2):
        return True
    if t == "the":
        matched = _match_predicate(tokens, i + 1)
        if matched is not None and matched[1] < len(tokens) and tokens[matched[1]] in _CONNECTORS:
            return True
    return False


def _parse_rel_phrase(tokens: list[str], offset: int) -> tuple[str, str]:
    """One `(to the)? <predicate> (of|from|to)? the <referent>` phrase."""
    pos = 0
    if tokens[pos : pos + 2] == ["to", "the"]:
        pos += 2
    elif tokens[pos : pos + 1] == ["the"]:
        pos += 1
    matched = _match_predicate(tokens, pos)
    if matched is None:
        tok = tokens[pos] if pos < len(tokens) else None
        raise ParseError("expected a spatial predicate", tok, offset + pos)
    predicate, pos = matched
    if pos < len(tokens) and tokens[pos] in _CONNECTORS:
        pos += 1
    if pos >= len(tokens) or tokens[pos] != "the":
        tok = tokens[pos] if pos < len(tokens) else None
        raise ParseError("expected 'the' before the referent", tok, offset + pos)
    pos += 1
    if pos >= len(tokens):
        raise ParseError("missing referent", None, offset + pos)
    return " ".join(tokens[pos:]), predicate


def _split_phrases(tokens: list[str], offset: int) -> list[tuple[list[str], int]]:
    phrases: list[tuple[list[str], int]] = []
    current: list[str] = []
    start = offset
    for i, tok in enumerate(tokens):
        if tok in ("and", ","):
            if current:
                phrases.append((current, start))
                current = []
            start = offset + i + 1
        else:
            current.append(tok)
    if current:
        phrases.append((current, start))
    return phrases


def parse_grammar(instruction: str) -> ParsedInstruction:
    """Deterministic parse of `<verb> [the <source>] <rel-phrase> (and|,) ...`.

    Raises ParseError naming the first token that does not fit the grammar.
    """
    tokens = _instruction_tokens(instruction)
    if not tokens:
        raise ParseError("empty instruction")
    action = tokens[0]
    if action in _PRED_FIRST_WORDS or action in (",", "the", "and"):
        raise ParseError("expected a verb", action, 0)
    pos = 1
    source = SELF_SOURCE
    if pos < len(tokens) and tokens[pos] == "the":
        scan = pos + 1
        while scan < len(tokens) and not _rel_phrase_starts(tokens, scan):
            scan += 1
        if scan == pos + 1:
            tok = tokens[scan] if scan < len(tokens) else None
            raise ParseError("expected a source object after 'the'", tok, scan)
        source_tokens = [t for t in tokens[pos + 1 : scan] if t != ","]
        source = " ".join(source_tokens)
        pos = scan
    if pos >= len(tokens):
        raise ParseError("instruction has no referring expression", None, pos)
    targets = []
    for phrase, start in _split_phrases(tokens[pos:], pos):
        targets.append(_parse_rel_phrase(phrase, start))
    if not targets:
        raise ParseError("instruction has no referring expression", None, pos)
    return ParsedInstruction(action=action, source=source, targets=tuple(targets))


def parse_relation_phrases(text: str) -> list[tuple[str, str]]:
    """Parse bare comma/and-separated relation phrases (no verb, no source).

    Session-style inputs like "left of the red box and close to the tree"
    use this form.
    """
    tokens = _instruction_tokens(text)
    if not tokens:
        raise ParseError("empty expression")
    return [
        _parse_rel_phrase(phrase, start) for phrase, start in _split_phrases(tokens, 0)
    ]


def parse_expression(text: str) -> ParsedInstruction:
    """Accept either a full instruction or bare relation phrases."""
    tokens = _instruction_tokens(text)
    if tokens and not _rel_phrase_starts(tokens, 0):
        return parse_grammar(text)
    targets = parse_relation_phrases(text)
    return ParsedInstruction(action="", source=SELF_SOURCE, targets=tuple(targets))


# ---------------------------------------------------------------------------
# LLM backend
# ---------------------------------------------------------------------------


def _chat_request(instruction: str, config: LlmClientConfig) -> dict:
    return {
        "model": config.model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": config.prompt},
            {"role": "user", "content": instruction},
        ],
    }


def request_hash(request: dict) -> str:
    canonical = json.dumps(request, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _load_replay(path: str) -> dict[str, str]:
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            table[record["request_hash"]] = record["reply"]
    return table


def record_replay_entry(instruction: str, reply: str, config: LlmClientConfig) -> dict:
    """One replay-transcript record for the given instruction."""
    return {
        "request_hash": request_hash(_chat_request(instruction, config)),
        "reply": reply,
    }


def _extract_json_object(text: str) -> dict:
    start = text.find("{")
    if start < 0:
        raise LlmSchemaError(f"no JSON object in reply: {text[:120]!r}")
    depth = 0
    for i in range(start, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                try:
                    return json.loads(text[start : i + 1])
                except json.JSONDecodeError as exc:
                    raise LlmSchemaError(f"malformed JSON in reply: {exc}") from exc
    raise LlmSchemaError("unbalanced JSON object in reply")


def _validate_reply_schema(obj: dict) -> ParsedInstruction:
    if not isinstance(obj, dict):
        raise LlmSchemaError(f"reply must be an object, got {type(obj).__name__}")
    for key in ("action", "source", "target"):
        if key not in obj:
            raise LlmSchemaError(f"reply is missing key {key!r}")
    if not isinstance(obj["action"], str) or not isinstance(obj["source"], str):
        raise LlmSchemaError("action and source must be strings")
    if not isinstance(obj["target"], list):
        raise LlmSchemaError("target must be a list")
    targets = []
    for item in obj["target"]:
        if (
            not isinstance(item, (list, tuple))
            or len(item) != 2
            or not all(isinstance(x, str) for x in item)
        ):
            raise LlmSchemaError(f"bad target entry: {item!r}")
        targets.append((item[0], item[1].lower()))
    return ParsedInstruction(
        action=obj["action"], source=obj["source"], targets=tuple(targets)
    )


def parse_llm(instruction: str, config: LlmClientConfig) -> ParsedInstruction:
    """Parse via a chat-completion endpoint (or a replay transcript).

    Endpoints of the form ``replay:<path>`` answer from a recorded
    transcript instead of the network. Transport problems raise
    LlmTransportError, malformed replies raise LlmSchemaError, so callers
    can fall back to parse_grammar on either, distinctly.
    """
    request = _chat_request(instruction, config)
    if config.endpoint.startswith("replay:"):
        path = config.endpoint[len("replay:") :]
        try:
            table = _load_replay(path)
        except OSError as exc:
            raise LlmTransportError(f"cannot read replay transcript: {exc}") from exc
        key = request_hash(request)
        if key not in table:
            raise LlmTransportError(f"no recorded reply for request {key[:12]}...")
        content = table[key]
    else:
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        try:
            response = requests.post(
                config.endpoint, json=request, headers=headers, timeout=config.timeout
            )
            response.raise_for_status()
            body = response.json()
        except (requests.RequestException, ValueError) as exc:
            raise LlmTransportError(f"chat endpoint failed: {exc}") from exc
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmSchemaError(f"unexpected completion envelope: {body!r}") from exc
    return _validate_reply_schema(_extract_json_object(content))


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------


def normalize_action(action: str, skill_set: list[str]) -> str:
    """Snap a free-form verb onto the most similar known skill."""
    if not skill_set:
        raise ValueError("skill_set must be nonempty")
    action_vec = embed_text(action)
    best, best_score = skill_set[0], -math.inf
    for skill in skill_set:
        score = cosine(action_vec, embed_text(skill))
        if score > best_score:
            best, best_score = skill, score
    return best


def to_relation_tuples(parsed: ParsedInstruction) -> list[RelationTuple]:
    """Embed the (referent, predicate) pairs, preserving instruction order."""
    if not parsed.targets:
        raise ValueError("instruction has no referring expressions")
    return [
        RelationTuple(
            ref_text=ref,
            pred_text=pred,
            f_ref=embed_text(ref),
            f_pred=embed_text(pred),
        )
        for ref, pred in parsed.targets
    ]
