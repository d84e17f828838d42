"""Synthetic two-language program corpus and exact-match evaluation.

A program is a short stack-machine script over single-digit literals. It is
rendered in one of two surface languages that share digit tokens but use
disjoint keyword/punctuation tokens. The task is to emit the program's
integer result after a query token.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import make_rng

OPS = ("push", "add", "sub", "mul", "dup")
BINARY = {"add", "sub", "mul"}
I32_MIN, I32_MAX = -(2**31), 2**31 - 1

# shared tokens
PAD, EOS, QUERY, MINUS = 0, 1, 2, 3
DIGIT0 = 4
SHARED = ["<pad>", "<eos>", "<query>", "-"] + [str(d) for d in range(10)]

_SURFACE_SLOTS = ("header", "open", "close", "delim", "ret") + OPS
_SURFACE_WORDS = {
    "lang_a": ("def", ":", "<dedent>", "<nl>", "return", "push", "add", "sub", "mul", "dup"),
    "lang_b": ("class", "{", "}", ";", "yield", "Push", "Add", "Sub", "Mul", "Dup"),
}
LANGUAGES = tuple(_SURFACE_WORDS)


@dataclass(frozen=True)
class SurfaceLanguage:
    name: str
    tokens: dict[str, int]  # slot -> token id

    def keyword(self, slot: str) -> int:
        return self.tokens[slot]


def _build_vocab():
    words = list(SHARED)
    langs = {}
    for name, surf in _SURFACE_WORDS.items():
        table = {}
        for slot, word in zip(_SURFACE_SLOTS, surf):
            table[slot] = len(words)
            words.append(f"{name}:{word}")
        langs[name] = SurfaceLanguage(name, table)
    return words, langs


VOCAB, _LANGS = _build_vocab()
VOCAB_SIZE = len(VOCAB)
VOCAB_HASH = hashlib.sha256("\n".join(VOCAB).encode()).hexdigest()[:16]


def language(name: str) -> SurfaceLanguage:
    try:
        return _LANGS[name]
    except KeyError:
        raise ValueError(f"unknown language {name!r}; choose from {LANGUAGES}") from None


# ---------------------------------------------------------------- programs


@dataclass(frozen=True)
class ProgramSpec:
    ops: tuple[tuple[str, int | None], ...]


def _apply(op: str, arg, stack: list[int]) -> None:
    if op == "push":
        stack.append(arg)
    elif op == "dup":
        stack.append(stack[-1])
    else:
        b, a = stack.pop(), stack.pop()
        stack.append(a + b if op == "add" else a - b if op == "sub" else a * b)


def evaluate(program: ProgramSpec) -> int:
    stack: list[int] = []
    for op, arg in program.ops:
        need = 2 if op in BINARY else 1 if op == "dup" else 0
        if len(stack) < need:
            raise ValueError(f"stack underflow at {op}")
        _apply(op, arg, stack)
    if not stack:
        raise ValueError("program leaves an empty stack")
    return stack[-1]


def gen_program(rng: np.random.Generator, max_ops: int) -> ProgramSpec:
    if max_ops < 1:
        raise ValueError("max_ops must be >= 1")
    n_ops = int(rng.integers(1, max_ops + 1))
    ops: list[tuple[str, int | None]] = []
    stack: list[int] = []
    for _ in range(n_ops):
        allowed = ["push"]
        if stack:
            allowed.append("dup")
        if len(stack) >= 2:
            allowed += ["add", "sub", "mul"]
        op = allowed[int(rng.integers(len(allowed)))]
        arg = int(rng.integers(10)) if op == "push" else None
        trial = list(stack)
        _apply(op, arg, trial)
        if not I32_MIN <= trial[-1] <= I32_MAX:
            op, arg = "push", int(rng.integers(10))
            trial = list(stack)
            _apply(op, arg, trial)
        ops.append((op, arg))
        stack = trial
    return ProgramSpec(tuple(ops))


def render(program: ProgramSpec, lang: SurfaceLanguage | str) -> list[int]:
    if isinstance(lang, str):
        lang = language(lang)
    t = lang.tokens
    out = [t["header"], t["open"]]
    for op, arg in program.ops:
        out.append(t[op])
        if op == "push":
            out.append(DIGIT0 + arg)
        out.append(t["delim"])
    out += [t["ret"], t["close"]]
    return out


def parse(tokens, lang: SurfaceLanguage | str) -> ProgramSpec:
    if isinstance(lang, str):
        lang = language(lang)
    t = lang.tokens
    inv = {v: k for k, v in t.items()}
    toks = list(tokens)
    if toks[:2] != [t["header"], t["open"]] or toks[-2:] != [t["ret"], t["close"]]:
        raise ValueError("missing program header or footer")
    body = toks[2:-2]
    ops = []
    i = 0
    while i < len(body):
        op = inv.get(body[i])
        if op not in OPS:
            raise ValueError(f"expected an operation keyword at body position {i}")
        i += 1
        arg = None
        if op == "push":
            if i >= len(body) or not DIGIT0 <= body[i] < DIGIT0 + 10:
                raise ValueError("push needs a digit literal")
            arg = body[i] - DIGIT0
            i += 1
        if i >= len(body) or body[i] != t["delim"]:
            raise ValueError("missing statement delimiter")
        i += 1
        ops.append((op, arg))
    return ProgramSpec(tuple(ops))


def render_int(value: int) -> list[int]:
    s = str(value)
    return [MINUS if ch == "-" else DIGIT0 + int(ch) for ch in s] + [EOS]


def decode_int(tokens) -> int:
    toks = list(tokens)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    chars = []
    for tok in toks:
        if tok == MINUS:
            chars.append("-")
        elif DIGIT0 <= tok < DIGIT0 + 10:
            chars.append(str(tok - DIGIT0))
        else:
            raise ValueError(f"token {tok} is not numeric")
    return int("".join(chars))


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Sample:
    program_id: int
    prompt: tuple[int, ...]
    target: tuple[int, ...]
    language: str

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.target


@dataclass
class Dataset:
    samples: list[Sample]
    language: str
    data_seed: int = 0
    split_seed: int = 0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def program_ids(self) -> list[int]:
        return [s.program_id for s in self.samples]

    def max_len(self) -> int:
        return max(len(s.tokens) for s in self.samples)


def make_sample(program_id: int, program: ProgramSpec, lang: str) -> Sample:
    return Sample(program_id, tuple(render(program, lang)) + (QUERY,), tuple(render_int(evaluate(program))), lang)


def build_programs(n: int, data_seed: int, max_ops: int) -> list[ProgramSpec]:
    return [gen_program(make_rng(data_seed, "program", i), max_ops) for i in range(n)]


def build_dataset(
    n: int,
    language: str,
    split_seed: int,
    data_seed: int = 0,
    max_ops: int = 4,
    test_frac: float = 0.1,
) -> tuple[Dataset, Dataset]:
    """Train/test split of ``n`` programs rendered in ``language``.

    Program ``i`` depends only on ``data_seed`` and ``i``, and the split only
    on ``split_seed``, so the same ids land on the same side in either
    language.
    """
    if n < 2:
        raise ValueError("need n >= 2 to split")
    programs = build_programs(n, data_seed, max_ops)
    perm = make_rng(split_seed, "split").permutation(n)
    n_test = min(n - 1, max(1, int(round(n * test_frac))))
    test_ids = set(int(i) for i in perm[:n_test])
    train, test = [], []
    for i, prog in enumerate(programs):
        (test if i in test_ids else train).append(make_sample(i, prog, language))
    return (
        Dataset(train, language, data_seed, split_seed),
        Dataset(test, language, data_seed, split_seed),
    )


def export_dataset(ds: Dataset, path) -> None:
    lines = [f"# vocab_hash={VOCAB_HASH} data_seed={ds.data_seed} split_seed={ds.split_seed} language={ds.language}"]
    for s in ds:
        lines.append(
            " ".join(map(str, s.prompt)) + "\t" + " ".join(map(str, s.target)) + f"\t{s.program_id}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def import_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("dataset file lacks its header line")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
    if meta.get("vocab_hash") != VOCAB_HASH:
        raise ValueError(f"vocab hash {meta.get('vocab_hash')} does not match {VOCAB_HASH}")
    samples = []
    for line in lines[1:]:
        prompt, target, pid = line.split("\t")
        samples.append(
            Sample(int(pid), tuple(map(int, prompt.split())), tuple(map(int, target.split())), meta["language"])
        )
    return Dataset(samples, meta["language"], int(meta["data_seed"]), int(meta["split_seed"]))


# ---------------------------------------------------------------- metrics


@dataclass
class DecodeConfig:
    strategy: str = "greedy"  # greedy | sample | beam
    temperature: float = 0.0
    top_p: float = 1.0
    beam_size: int = 1
    max_new: int = 12
    seed: int = 0


@dataclass
class EvalReport:
    n_problems: int
    n_correct: int
    pass_at_1: float
    outcomes: list[tuple[int, bool, tuple[int, ...]]] = field(default_factory=list)


def _decode_all(model, adapters, prompts, cfg: DecodeConfig) -> list[list[int]]:
    from . import model as M

    if cfg.strategy == "greedy" and isinstance(model, M.DecoderModel):
        return M.greedy_decode_batch(model, adapters, prompts, cfg.max_new, EOS)
    out = []
    for i, p in enumerate(prompts):
        if cfg.strategy == "greedy":
            out.append(M.greedy_decode(model, adapters, p, cfg.max_new, EOS))
        elif cfg.strategy == "sample":
            rng = make_rng(cfg.seed, "sample", i)
            out.append(M.sample_decode(model, adapters, p, cfg.temperature, cfg.top_p, rng, cfg.max_new, EOS))
        elif cfg.strategy == "beam":
            out.append(M.beam_decode(model, adapters, p, cfg.beam_size, cfg.max_new, EOS))
        else:
            raise ValueError(f"unknown decode strategy {cfg.strategy!r}")
    return out


def pass_at_1(model, adapters, dataset: Dataset, decode_cfg: DecodeConfig | None = None) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = decode_cfg or DecodeConfig()
    decoded = _decode_all(model, adapters, [list(s.prompt) for s in dataset], cfg)
    outcomes = [(s.program_id, tuple(d) == s.target, tuple(d)) for s, d in zip(dataset, decoded)]
    n_ok = sum(ok for _, ok, _ in outcomes)
    return EvalReport(len(dataset), n_ok, n_ok / len(dataset), outcomes)


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased ``1 - C(n-c, k) / C(n, k)`` in product form."""
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    if not (0 <= c <= n and k >= 1):
        raise ValueError(f"need 0 <= c <= n and k >= 1 (n={n}, c={c}, k={k})")
    if n - c < k:
        return 1.0
    return float(1.0 - np.prod(1.0 - k / np.arange(n - c + 1, n + 1)))
