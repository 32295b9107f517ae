"""Text-completion backends and the factor proposal protocol.

Two interchangeable backends sit behind one complete() call: a wire client
for any OpenAI-compatible chat-completions service, and a mock that is a
pure function of the request, for offline runs that must reproduce bit for
bit. Model responses carry factor candidates in a rigid tagged block

    NAME: <short identifier>
    EXPR: <expression in the factor grammar>
    DESC: <one-line rationale>

usually inside a code fence; everything around the three tagged lines is
ignored. A rigid protocol keeps parsing deterministic and makes every
failure attributable to a specific missing or malformed field.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from hashlib import blake2b

import numpy as np
import requests

from .dsl import (
    FIELD_NAMES,
    OPERATORS,
    ConstLeaf,
    Expr,
    ExprLimits,
    FieldLeaf,
    Node,
    canonical_hash,
    fields_used,
    format_expr,
    parse,
    validate,
)

GENERATE_SENTINEL = "[task=generate-seed-factor]"
OPTIMIZE_SENTINEL = "[task=refine-factor]"
BASE_MARKER = "BASE:"

DEFAULT_API_KEY_ENV = "ALPHACHAIN_API_KEY"

MOCK_WINDOWS = (2, 3, 5, 10, 20)
MOCK_CONSTANTS = (1.0, 2.0, 5.0)
_QUANTILE_CHOICES = (0.25, 0.5, 0.75)
_POWER_CHOICES = (2.0, 0.5, -1.0)


class BackendError(RuntimeError):
    """Base of every completion failure; chains catch this, nothing broader."""


class AuthMissing(BackendError):
    pass


class HttpStatus(BackendError):
    def __init__(self, code: int, body: str):
        super().__init__(f"HTTP {code}: {body[:200]}")
        self.code = code
        self.body = body[:200]


class Timeout(BackendError):
    """Timeouts and connection-level failures: retryable transport trouble."""


class MalformedResponse(BackendError):
    pass


class RetriesExhausted(BackendError):
    pass


class MissingField(ValueError):
    def __init__(self, which: str):
        super().__init__(f"proposal is missing its {which.upper()} line")
        self.which = which


class ExprParseFailed(ValueError):
    def __init__(self, inner: Exception):
        super().__init__(f"proposal expression does not parse: {inner}")
        self.inner = inner


@dataclass(frozen=True)
class CompletionRequest:
    system_text: str
    user_text: str
    temperature: float = 1.0
    max_tokens: int = 1024
    seed_hint: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class FactorProposal:
    name: str
    expr_text: str
    description: str

    def __post_init__(self) -> None:
        parse(self.expr_text)  # raises on invalid grammar


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 30.0
    max_retries: int = 3
    retry_initial_delay: float = 0.5
    retry_multiplier: float = 2.0
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ("http", "mock"):
            raise ValueError(f"kind must be http or mock, got {self.kind!r}")
        if self.kind == "http" and not (self.endpoint and self.model):
            raise ValueError("http backend requires endpoint and model")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def parse_proposal(text: str) -> FactorProposal:
    """Extract the NAME/EXPR/DESC lines; prose and fences around them are
    ignored. EXPR must parse under the factor grammar."""
    found: dict[str, str] = {}
    for line in text.splitlines():
        stripped = line.strip()
        for tag in ("NAME", "EXPR", "DESC"):
            prefix = tag + ":"
            if stripped.startswith(prefix) and tag.lower() not in found:
                found[tag.lower()] = stripped[len(prefix):].strip()
    for tag in ("name", "expr", "desc"):
        if tag not in found or not found[tag]:
            raise MissingField(tag)
    try:
        parse(found["expr"])
    except ValueError as exc:
        raise ExprParseFailed(exc) from exc
    return FactorProposal(found["name"], found["expr"], found["desc"])


def render_proposal(proposal: FactorProposal) -> str:
    return (
        "```\n"
        f"NAME: {proposal.name}\n"
        f"EXPR: {proposal.expr_text}\n"
        f"DESC: {proposal.description}\n"
        "```"
    )


# --- mock backend ---------------------------------------------------------


def _choice(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _sample_leaf(rng: np.random.Generator) -> Expr:
    if rng.random() < 0.85:
        return FieldLeaf(_choice(rng, FIELD_NAMES))
    return ConstLeaf(_choice(rng, MOCK_CONSTANTS))


def _sample_node(rng, depth_left, nodes_left, windows, ops) -> tuple[Expr, int]:
    if depth_left <= 1 or nodes_left <= 1 or rng.random() < 0.35:
        return _sample_leaf(rng), 1
    affordable = [op for op in ops if op.arity + 1 <= nodes_left]
    if not affordable:
        return _sample_leaf(rng), 1
    op = _choice(rng, affordable)
    children = []
    used = 1
    for _ in range(op.arity):
        child, n = _sample_node(rng, depth_left - 1, nodes_left - used, windows, ops)
        children.append(child)
        used += n
    window_args = tuple(_choice(rng, windows) for _ in range(op.window_params))
    extras = tuple(
        _choice(rng, _QUANTILE_CHOICES if op.name == "Quantile" else _POWER_CHOICES)
        for _ in range(op.extra_params)
    )
    return Node(op, tuple(children), window_args, extras), used


def _describe(expr: Expr) -> str:
    fields = sorted(fields_used(expr))
    listed = ", ".join(fields) if fields else "constants only"
    return f"Deterministic candidate built from {listed}."


def _name_for(expr: Expr, seed: int) -> str:
    root = expr.op.name if isinstance(expr, Node) else "leaf"
    fields = sorted(fields_used(expr))
    stem = fields[0] if fields else "const"
    return f"{root.lower()}_{stem}_{seed % 997}"


def mock_generate(seed: int, limits: ExprLimits | None = None) -> FactorProposal:
    """Sample a random valid expression, bounded by limits and guaranteed to
    reference at least one market field. Pure function of seed."""
    limits = limits or ExprLimits()
    windows = tuple(w for w in MOCK_WINDOWS if w <= limits.max_window) or (1,)
    ops = [
        op
        for op in OPERATORS.values()
        if limits.operator_whitelist is None or op.name in limits.operator_whitelist
    ]
    rng = np.random.default_rng(seed)
    for _ in range(100):
        expr, _ = _sample_node(
            rng, min(limits.max_depth, 5), min(limits.max_nodes, 16), windows, ops
        )
        if fields_used(expr) and not validate(expr, limits):
            break
    else:
        expr = FieldLeaf("close")
    return FactorProposal(_name_for(expr, seed), format_expr(expr), _describe(expr))


def _subtrees(expr: Expr) -> list[Expr]:
    out = [expr]
    if isinstance(expr, Node):
        for c in expr.children:
            out.extend(_subtrees(c))
    return out


def _rebuild(expr: Expr, target_index: int, fn, counter: list[int]) -> Expr:
    """Replace the preorder target_index-th subtree with fn(subtree)."""
    index = counter[0]
    counter[0] += 1
    if index == target_index:
        return fn(expr)
    if not isinstance(expr, Node):
        return expr
    children = tuple(_rebuild(c, target_index, fn, counter) for c in expr.children)
    return Node(expr.op, children, expr.windows, expr.reals)


def _mutate_at(expr: Expr, target_index: int, fn) -> Expr:
    return _rebuild(expr, target_index, fn, [0])


def _window_step(w: int) -> int:
    if w in MOCK_WINDOWS:
        i = MOCK_WINDOWS.index(w)
        return MOCK_WINDOWS[i - 1] if i == len(MOCK_WINDOWS) - 1 else MOCK_WINDOWS[i + 1]
    candidates = [c for c in MOCK_WINDOWS if c != w]
    return min(candidates, key=lambda c: abs(c - w))


def _swap_group(op_name: str) -> list[str]:
    op = OPERATORS[op_name]
    key = (op.category, op.arity, op.window_params, op.extra_params)
    return [
        name
        for name, other in OPERATORS.items()
        if name != op_name
        and (other.category, other.arity, other.window_params, other.extra_params) == key
    ]


def mock_optimize(seed: int, base: Expr) -> FactorProposal:
    """One seeded local mutation of base: a window nudge along the mock
    window ladder, an operator swap within the same category and shape, or
    wrapping a subtree in Abs or Rank(., 5). Always yields a valid expression
    distinct from base; pure function of (seed, base)."""
    rng = np.random.default_rng(seed)
    nodes = _subtrees(base)
    windowed = [i for i, n in enumerate(nodes) if isinstance(n, Node) and n.windows]
    swappable = [
        i for i, n in enumerate(nodes) if isinstance(n, Node) and _swap_group(n.op.name)
    ]
    kinds = ["wrap"]
    if windowed:
        kinds.append("window")
    if swappable:
        kinds.append("swap")
    kind = _choice(rng, sorted(kinds))
    if kind == "window":
        target = _choice(rng, windowed)
        slot = int(rng.integers(len(nodes[target].windows)))

        def nudge(node: Node) -> Node:
            windows = list(node.windows)
            windows[slot] = _window_step(windows[slot])
            return Node(node.op, node.children, tuple(windows), node.reals)

        mutated = _mutate_at(base, target, nudge)
    elif kind == "swap":
        target = _choice(rng, swappable)
        group = _swap_group(nodes[target].op.name)

        def swap(node: Node) -> Node:
            replacement = OPERATORS[_choice(rng, group)]
            return Node(replacement, node.children, node.windows, node.reals)

        mutated = _mutate_at(base, target, swap)
    else:
        target = int(rng.integers(len(nodes)))

        def wrap(node: Expr) -> Node:
            if rng.random() < 0.5:
                return Node(OPERATORS["Abs"], (node,))
            return Node(OPERATORS["Rank"], (node,), (5,))

        mutated = _mutate_at(base, target, wrap)
    if canonical_hash(mutated) == canonical_hash(base):
        # a clamped nudge or symmetric swap can land back on base; wrapping
        # always grows the tree, so it always produces a fresh hash
        mutated = _mutate_at(base, 0, lambda node: Node(OPERATORS["Abs"], (node,)))
    return FactorProposal(
        f"refined_{seed % 997}", format_expr(mutated), _describe(mutated)
    )


def _mock_seed(request: CompletionRequest) -> int:
    blob = "\x1f".join(
        [str(request.seed_hint), request.system_text, request.user_text]
    ).encode("utf-8")
    return int.from_bytes(blake2b(blob, digest_size=8).digest(), "big")


def _find_base_expr(user_text: str) -> Expr | None:
    for line in user_text.splitlines():
        stripped = line.strip()
        if stripped.startswith(BASE_MARKER):
            try:
                return parse(stripped[len(BASE_MARKER):].strip())
            except ValueError:
                return None
    return None


def _mock_complete(request: CompletionRequest) -> str:
    seed = _mock_seed(request)
    if OPTIMIZE_SENTINEL in request.user_text:
        base = _find_base_expr(request.user_text)
        if base is not None:
            return render_proposal(mock_optimize(seed, base))
    return render_proposal(mock_generate(seed))


# --- http backend ---------------------------------------------------------


@lru_cache(maxsize=None)
def _limiter(endpoint: str, limit: int) -> threading.BoundedSemaphore:
    return threading.BoundedSemaphore(limit)


def _requests_transport(url, payload, headers, timeout):
    try:
        resp = requests.post(url, data=payload, headers=headers, timeout=timeout)
    except requests.exceptions.RequestException as exc:
        raise Timeout(str(exc)) from exc
    return resp.status_code, resp.content


def _extract_content(body) -> str:
    if isinstance(body, bytes):
        body = body.decode("utf-8", errors="replace")
    try:
        data = json.loads(body)
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"cannot read completion payload: {exc}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("message content is not text")
    return content


def _http_complete(request: CompletionRequest, config: BackendConfig, transport) -> str:
    key = os.environ.get(config.api_key_env, "")
    if not key:
        raise AuthMissing(f"set {config.api_key_env} to use the http backend")
    url = config.endpoint.rstrip("/") + "/chat/completions"
    payload = json.dumps(
        {
            "model": config.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
    ).encode("utf-8")
    headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
    attempts = config.max_retries + 1
    delay = config.retry_initial_delay
    last_error: BackendError | None = None
    for attempt in range(attempts):
        try:
            with _limiter(config.endpoint, config.max_in_flight):
                status, body = transport(url, payload, headers, config.timeout)
        except Timeout as exc:
            last_error = exc
        else:
            if status == 200:
                return _extract_content(body)
            if isinstance(body, bytes):
                body = body.decode("utf-8", errors="replace")
            error = HttpStatus(status, body)
            if status != 429 and not 500 <= status <= 599:
                raise error  # client errors are not retryable
            last_error = error
        if attempt < attempts - 1 and delay > 0:
            time.sleep(delay)
            delay *= config.retry_multiplier
    raise RetriesExhausted(
        f"gave up after {attempts} attempts: {last_error}"
    ) from last_error


def complete(
    request: CompletionRequest,
    config: BackendConfig,
    transport=None,
    log_path=None,
) -> str:
    """Run one completion. The mock is a pure function of the request; the
    http path posts an OpenAI-style chat payload and retries 429/5xx/timeout
    with exponential backoff. transport is injectable for tests; log_path
    appends a JSON-lines transcript of (request, response) for replay."""
    if config.kind == "mock":
        text = _mock_complete(request)
    else:
        text = _http_complete(request, config, transport or _requests_transport)
    if log_path is not None:
        entry = {
            "system_text": request.system_text,
            "user_text": request.user_text,
            "seed_hint": request.seed_hint,
            "response": text,
        }
        with open(log_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
    return text
