"""Attention seq2seq question parser with a two-headed decoder.

The encoder is a stacked bidirectional LSTM; position ``i`` is encoded as the
concatenation of the top layer's forward and backward outputs. The decoder is a
stacked LSTM whose hidden size equals the encoder output size, fed with the
concatenated embeddings of the previous (operation, argument) token pair. Dot
attention uses a fixed identity bilinear matrix ``W_A``. Each decoder step emits
one operation token and one argument token; dependencies are not predicted but
rebuilt by :func:`chain_dependencies`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grammar import QAPair, tokenize
from .nn import (
    DimensionMismatch,
    NonFiniteLoss,
    finite_difference_check,
    init_lstm,
    load_checkpoint,
    log_softmax,
    lstm_step,
    lstm_step_backward,
    make_optimizer,
    save_checkpoint,
    softmax,
    softmax_backward,
)
from .program import (
    DEFAULT_CATALOG,
    Catalog,
    FunctionCall,
    Program,
    ValueType,
    validate,
)

PAD, UNK, START, END, NONE = "<pad>", "<unk>", "<start>", "<end>", "<none>"
FROZEN = ("W_A",)


class ParseFailure(Exception):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class ParserConfig:
    embed_dim: int = 300
    hidden_dim: int = 256
    layers: int = 2
    learning_rate: float = 7e-4
    batch_size: int = 64
    max_steps: int = 20000
    optimizer: str = "sgd"
    momentum: float = 0.0
    clip: float = 5.0
    t_max: int = 16
    l_max: int = 24
    seed: int = 0
    dtype: str = "float64"
    eval_every: int = 0

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, self.layers) <= 0:
            raise ValueError("parser dims must be positive")

    @classmethod
    def toy(cls, **overrides) -> ParserConfig:
        base = dict(embed_dim=32, hidden_dim=32, learning_rate=5e-3, batch_size=32, max_steps=1500,
                    optimizer="adam")
        base.update(overrides)
        return cls(**base)


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(dict.fromkeys(tokens))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index.get(UNK, 0))

    def __getitem__(self, i: int) -> str:
        return self.tokens[i]


# ---------------------------------------------------------------------------
# function <-> token pair


def function_tokens(call: FunctionCall) -> tuple[str, str]:
    args = list(call.arguments)
    if call.direction == "object":
        args.append("(o)")
    return call.name, "|".join(args) if args else NONE


def tokens_to_call(index: int, op_token: str, arg_token: str) -> FunctionCall:
    op, _, category = op_token.partition(" ")
    negate = False
    if category.startswith("not(") and category.endswith(")"):
        negate, category = True, category[4:-1]
    args = [] if arg_token == NONE else arg_token.split("|")
    direction = "subject"
    if "(o)" in args:
        direction = "object"
        args = [a for a in args if a != "(o)"]
    return FunctionCall(index, op, category or None, tuple(args), (), negate, direction)


def chain_dependencies(pairs: Sequence[tuple[str, str]], catalog: Catalog = DEFAULT_CATALOG) -> Program:
    """Rebuild dependencies from a decoded (operation, argument) sequence.

    Every call consumes the most recent still-unconsumed outputs of the types its
    signature asks for; two-input calls take the two most recent, in index order.
    """
    calls = []
    pending: list[tuple[int, ValueType]] = []
    for index, (op_token, arg_token) in enumerate(pairs):
        call = tokens_to_call(index, op_token, arg_token)
        if call.operation not in catalog:
            raise ParseFailure(f"step {index}: unknown operation token {op_token!r}")
        sig = catalog.signature(call.operation)
        deps: list[int] = []
        for want in reversed(sig.input_types):
            for k in range(len(pending) - 1, -1, -1):
                if pending[k][1] is want:
                    deps.append(pending.pop(k)[0])
                    break
            else:
                raise ParseFailure(f"step {index}: {call.operation} has no {want.value} input to consume")
        deps.sort()
        calls.append(FunctionCall(index, call.operation, call.category, call.arguments, tuple(deps),
                                  call.negate, call.direction))
        pending.append((index, sig.output_type))
    if not calls:
        raise ParseFailure("empty decode")
    program = Program(tuple(calls))
    diags = validate(program, catalog)
    if diags:
        raise ParseFailure("; ".join(str(d) for d in diags))
    return program


# ---------------------------------------------------------------------------


@dataclass
class DecoderStep:
    q: np.ndarray
    alpha: np.ndarray
    context: np.ndarray


@dataclass
class Batch:
    tokens: np.ndarray
    lengths: np.ndarray
    in_op: np.ndarray
    in_arg: np.ndarray
    out_op: np.ndarray
    out_arg: np.ndarray
    out_mask: np.ndarray


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)


class Seq2SeqParser:
    def __init__(self, config: ParserConfig, question_vocab: Vocab, op_vocab: Vocab, arg_vocab: Vocab,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.qv, self.ov, self.av = question_vocab, op_vocab, arg_vocab
        self.dtype = np.dtype(config.dtype)
        self.params = params if params is not None else self._init_params()
        self.step = 0
        self.optimizer = None

    @classmethod
    def from_corpus(cls, pairs: Sequence[QAPair], config: ParserConfig) -> Seq2SeqParser:
        words, ops, args = set(), set(), set()
        for p in pairs:
            words.update(tokenize(p.question))
            for f in p.program:
                o, a = function_tokens(f)
                ops.add(o)
                args.add(a)
        return cls(config, Vocab([PAD, UNK] + sorted(words)), Vocab([START, END, UNK] + sorted(ops)),
                   Vocab([START, END, UNK, NONE] + sorted(args)))

    # -- parameters ---------------------------------------------------------

    @property
    def enc_dim(self) -> int:
        return 2 * self.config.hidden_dim

    def _init_params(self) -> dict[str, np.ndarray]:
        c, dt = self.config, self.dtype
        rng = np.random.default_rng(c.seed)
        H, E, D = c.hidden_dim, c.embed_dim, self.enc_dim
        P: dict[str, np.ndarray] = {}
        P["enc_embed"] = (rng.standard_normal((len(self.qv), E)) * 0.1).astype(dt)
        for l in range(c.layers):
            n_in = E if l == 0 else 2 * H
            init_lstm(P, f"enc{l}_fwd_", n_in, H, rng, dt)
            init_lstm(P, f"enc{l}_bwd_", n_in, H, rng, dt)
        P["dec_op_embed"] = (rng.standard_normal((len(self.ov), E)) * 0.1).astype(dt)
        P["dec_arg_embed"] = (rng.standard_normal((len(self.av), E)) * 0.1).astype(dt)
        for l in range(c.layers):
            init_lstm(P, f"dec{l}_", 2 * E if l == 0 else D, D, rng, dt)
        P["W_A"] = np.eye(D, dtype=dt)
        s = 1.0 / math.sqrt(2 * D)
        P["W_O"] = rng.uniform(-s, s, (2 * D, len(self.ov))).astype(dt)
        P["b_O"] = np.zeros(len(self.ov), dtype=dt)
        P["W_G"] = rng.uniform(-s, s, (2 * D, len(self.av))).astype(dt)
        P["b_G"] = np.zeros(len(self.av), dtype=dt)
        return P

    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in FROZEN]

    # -- batching -----------------------------------------------------------

    def question_ids(self, tokens: Sequence[str]) -> list[int]:
        if not tokens:
            raise EmptyInput("question has no tokens")
        if len(tokens) > self.config.l_max:
            raise ValueError(f"question longer than {self.config.l_max} tokens")
        return [self.qv.id(t) for t in tokens]

    def make_batch(self, pairs: Sequence[QAPair]) -> Batch:
        qs = [self.question_ids(p.tokens) for p in pairs]
        progs = [[function_tokens(f) for f in p.program] for p in pairs]
        B, L = len(pairs), max(len(q) for q in qs)
        T = max(len(pr) for pr in progs) + 1
        tokens = np.zeros((B, L), dtype=np.int64)
        lengths = np.array([len(q) for q in qs])
        in_op = np.zeros((B, T), dtype=np.int64)
        in_arg = np.zeros((B, T), dtype=np.int64)
        out_op = np.zeros((B, T), dtype=np.int64)
        out_arg = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T), dtype=self.dtype)
        for b, (q, pr) in enumerate(zip(qs, progs)):
            tokens[b, :len(q)] = q
            ops = [self.ov.id(o) for o, _ in pr] + [self.ov.id(END)]
            args = [self.av.id(a) for _, a in pr] + [self.av.id(END)]
            n = len(ops)
            out_op[b, :n], out_arg[b, :n] = ops, args
            in_op[b, :n] = [self.ov.id(START)] + ops[:-1]
            in_arg[b, :n] = [self.av.id(START)] + args[:-1]
            mask[b, :n] = 1
        return Batch(tokens, lengths, in_op, in_arg, out_op, out_arg, mask)

    # -- encoder ------------------------------------------------------------

    def _encode(self, tokens: np.ndarray, lengths: np.ndarray, keep_cache: bool):
        P, c = self.params, self.config
        B, L = tokens.shape
        H = c.hidden_dim
        inp = P["enc_embed"][tokens]
        caches, finals = [], []
        for l in range(c.layers):
            outs, layer_cache, layer_final = [], [], []
            for direction, order in (("fwd", range(L)), ("bwd", range(L - 1, -1, -1))):
                pre = f"enc{l}_{direction}_"
                h = np.zeros((B, H), dtype=self.dtype)
                cs = np.zeros((B, H), dtype=self.dtype)
                out = np.zeros((B, L, H), dtype=self.dtype)
                steps = {}
                for t in order:
                    m = (t < lengths).astype(self.dtype)
                    h, cs, cache = lstm_step(inp[:, t], h, cs, P[pre + "Wx"], P[pre + "Wh"], P[pre + "b"], m)
                    out[:, t] = h
                    if keep_cache:
                        steps[t] = cache
                outs.append(out)
                layer_cache.append(steps)
                layer_final.append((h, cs))
            caches.append(layer_cache)
            finals.append(layer_final)
            inp = np.concatenate(outs, axis=2)
        return inp, finals, caches

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        """Encoder states e_i = [e_i^F, e_i^B] for one question, shape (n, 2*hidden)."""
        ids = np.array([self.question_ids(list(tokens))])
        states, _, _ = self._encode(ids, np.array([ids.shape[1]]), keep_cache=False)
        return states[0]

    def _initial_decoder_state(self, finals):
        return [(np.concatenate([fh, bh], axis=1), np.concatenate([fc, bc], axis=1))
                for (fh, fc), (bh, bc) in finals]

    # -- decoder ------------------------------------------------------------

    def _attend(self, q, enc, valid):
        W_A = self.params["W_A"]
        if q.shape[-1] != enc.shape[-1] or W_A.shape != (q.shape[-1], enc.shape[-1]):
            raise DimensionMismatch(f"decoder state dim {q.shape[-1]} vs encoder state dim {enc.shape[-1]}")
        qa = q @ W_A
        scores = np.einsum("bd,bld->bl", qa, enc)
        scores = np.where(valid, scores, -np.inf)
        alpha = softmax(scores, axis=1)
        ctx = np.einsum("bl,bld->bd", alpha, enc)
        return qa, alpha, ctx

    def _dec_cell(self, x, state, keep_cache):
        P = self.params
        new_state, caches = [], []
        for l, (h, cs) in enumerate(state):
            pre = f"dec{l}_"
            h, cs, cache = lstm_step(x, h, cs, P[pre + "Wx"], P[pre + "Wh"], P[pre + "b"])
            new_state.append((h, cs))
            caches.append(cache if keep_cache else None)
            x = h
        return x, new_state, caches

    def decode_step(self, prev_op: str, prev_arg: str, state, encoder_states: np.ndarray):
        """One greedy-decoding step for a single question.

        ``state`` is the per-layer (h, c) list, ``encoder_states`` has shape
        (n, 2*hidden). Returns (op distribution, arg distribution, DecoderStep, new state).
        """
        P = self.params
        x = np.concatenate([P["dec_op_embed"][[self.ov.id(prev_op)]], P["dec_arg_embed"][[self.av.id(prev_arg)]]], 1)
        q, state, _ = self._dec_cell(x, state, keep_cache=False)
        enc = encoder_states[None]
        _, alpha, ctx = self._attend(q, enc, np.ones(enc.shape[:2], dtype=bool))
        u = np.concatenate([q, ctx], axis=1)
        p_op = softmax(u @ P["W_O"] + P["b_O"])[0]
        p_arg = softmax(u @ P["W_G"] + P["b_G"])[0]
        return p_op, p_arg, DecoderStep(q[0], alpha[0], ctx[0]), state

    def start_state(self, tokens: Sequence[str]):
        ids = np.array([self.question_ids(list(tokens))])
        enc, finals, _ = self._encode(ids, np.array([ids.shape[1]]), keep_cache=False)
        return self._initial_decoder_state(finals), enc[0]

    # -- loss and gradients ---------------------------------------------------

    def loss(self, batch: Batch):
        """Loss as a scalar of the model dtype (kept unrounded for finite differences)."""
        return self.loss_and_grad(batch, need_grad=False)[0]

    def loss_and_grad(self, batch: Batch, need_grad: bool = True):
        """Teacher-forced summed cross-entropy of both heads, averaged over the batch."""
        P, c = self.params, self.config
        B, L = batch.tokens.shape
        T = batch.in_op.shape[1]
        D, H, E = self.enc_dim, c.hidden_dim, c.embed_dim
        enc, finals, enc_caches = self._encode(batch.tokens, batch.lengths, keep_cache=need_grad)
        valid = np.arange(L)[None, :] < batch.lengths[:, None]
        state = self._initial_decoder_state(finals)
        rows = np.arange(B)
        total = np.zeros((), dtype=self.dtype)
        tape = []
        for t in range(T):
            x = np.concatenate([P["dec_op_embed"][batch.in_op[:, t]], P["dec_arg_embed"][batch.in_arg[:, t]]], 1)
            q, state, cell_caches = self._dec_cell(x, state, need_grad)
            qa, alpha, ctx = self._attend(q, enc, valid)
            u = np.concatenate([q, ctx], axis=1)
            lpo = log_softmax(u @ P["W_O"] + P["b_O"])
            lpg = log_softmax(u @ P["W_G"] + P["b_G"])
            m = batch.out_mask[:, t]
            total = total - (m * (lpo[rows, batch.out_op[:, t]] + lpg[rows, batch.out_arg[:, t]])).sum()
            if need_grad:
                tape.append((cell_caches, qa, alpha, u, lpo, lpg))
        loss = total / B
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss}")
        if not need_grad:
            return loss, None

        G = {k: np.zeros_like(v) for k, v in P.items()}
        d_enc = np.zeros_like(enc)
        dstate = [(np.zeros((B, D), self.dtype), np.zeros((B, D), self.dtype)) for _ in range(c.layers)]
        for t in range(T - 1, -1, -1):
            cell_caches, qa, alpha, u, lpo, lpg = tape[t]
            w = (batch.out_mask[:, t] / B)[:, None]
            dlo = np.exp(lpo)
            dlo[rows, batch.out_op[:, t]] -= 1
            dlo *= w
            dlg = np.exp(lpg)
            dlg[rows, batch.out_arg[:, t]] -= 1
            dlg *= w
            G["W_O"] += u.T @ dlo
            G["b_O"] += dlo.sum(0)
            G["W_G"] += u.T @ dlg
            G["b_G"] += dlg.sum(0)
            du = dlo @ P["W_O"].T + dlg @ P["W_G"].T
            dq, dctx = du[:, :D], du[:, D:]
            dalpha = np.einsum("bd,bld->bl", dctx, enc)
            d_enc += alpha[:, :, None] * dctx[:, None, :]
            dscore = softmax_backward(alpha, dalpha, axis=1)
            dqa = np.einsum("bl,bld->bd", dscore, enc)
            d_enc += dscore[:, :, None] * qa[:, None, :]
            dq = dq + dqa @ P["W_A"].T
            # back through the decoder stack at step t
            dh_above = dq
            new_dstate = [None] * c.layers
            for l in range(c.layers - 1, -1, -1):
                pre = f"dec{l}_"
                dh = dstate[l][0] + dh_above
                dx, dh_prev, dc_prev = lstm_step_backward(dh, dstate[l][1], cell_caches[l], P[pre + "Wx"],
                                                          P[pre + "Wh"], G, pre)
                new_dstate[l] = (dh_prev, dc_prev)
                dh_above = dx
            dstate = new_dstate
            np.add.at(G["dec_op_embed"], batch.in_op[:, t], dh_above[:, :E])
            np.add.at(G["dec_arg_embed"], batch.in_arg[:, t], dh_above[:, E:])

        # encoder, top layer first
        d_out = d_enc
        for l in range(c.layers - 1, -1, -1):
            dh0, dc0 = dstate[l]
            d_final = {"fwd": (dh0[:, :H], dc0[:, :H]), "bwd": (dh0[:, H:], dc0[:, H:])}
            d_in = None
            for k, (direction, order) in enumerate((("fwd", range(L - 1, -1, -1)), ("bwd", range(L)))):
                pre = f"enc{l}_{direction}_"
                dh, dcs = d_final[direction]
                d_dir = d_out[:, :, k * H:(k + 1) * H]
                for t in order:
                    dh = dh + d_dir[:, t]
                    dx, dh, dcs = lstm_step_backward(dh, dcs, enc_caches[l][k][t], P[pre + "Wx"], P[pre + "Wh"], G, pre)
                    if d_in is None:
                        d_in = np.zeros((B, L, dx.shape[1]), dtype=self.dtype)
                    d_in[:, t] += dx
            d_out = d_in
        np.add.at(G["enc_embed"], batch.tokens, d_out)
        for k in FROZEN:
            G[k][...] = 0
        return loss, G

    # -- training and inference -----------------------------------------------

    def train(self, pairs: Sequence[QAPair], steps: int | None = None, eval_pairs: Sequence[QAPair] = (),
              log=None) -> TrainResult:
        """Teacher-forced minibatch training; batch ``k`` is a pure function of (seed, k)."""
        if not pairs:
            raise ValueError("empty training corpus")
        c = self.config
        steps = c.max_steps if steps is None else steps
        if self.optimizer is None:
            self.optimizer = make_optimizer(c.optimizer, c.learning_rate, c.momentum, c.clip)
        opt = self.optimizer
        result = TrainResult()
        for _ in range(steps):
            rng = np.random.default_rng([c.seed, self.step])
            idx = rng.choice(len(pairs), size=min(c.batch_size, len(pairs)), replace=False)
            batch = self.make_batch([pairs[i] for i in idx])
            loss, G = self.loss_and_grad(batch)
            loss = float(loss)
            if c.learning_rate != 0:
                opt.step(self.params, G, frozen=FROZEN)
            result.losses.append(loss)
            self.step += 1
            if c.eval_every and eval_pairs and self.step % c.eval_every == 0:
                acc = program_accuracy(self, eval_pairs)
                acc["step"] = self.step
                result.evals.append(acc)
                if log:
                    log(f"step {self.step} loss {loss:.4f} function acc {acc['function']:.4f}")
        return result

    def decode(self, tokens: Sequence[str]) -> list[tuple[str, str]]:
        state, enc = self.start_state(tokens)
        prev = (START, START)
        out = []
        for _ in range(self.config.t_max):
            p_op, p_arg, _, state = self.decode_step(prev[0], prev[1], state, enc)
            op, arg = self.ov[int(np.argmax(p_op))], self.av[int(np.argmax(p_arg))]
            if op == END:
                break
            out.append((op, arg))
            prev = (op, arg)
        return out

    def predict_program(self, tokens: Sequence[str]) -> Program:
        return chain_dependencies(self.decode(tokens))

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "parser", "config": asdict(self.config), "step": self.step,
                "vocab": {"question": self.qv.tokens, "op": self.ov.tokens, "arg": self.av.tokens}}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.params, self.optimizer, meta)

    @classmethod
    def load(cls, path) -> Seq2SeqParser:
        params, opt_arrays, meta = load_checkpoint(path)
        cfg = ParserConfig(**meta["config"])
        dt = np.dtype(cfg.dtype)
        params = {k: v.astype(dt) for k, v in params.items()}
        model = cls(cfg, Vocab(meta["vocab"]["question"]), Vocab(meta["vocab"]["op"]),
                    Vocab(meta["vocab"]["arg"]), params)
        model.step = int(meta.get("step", 0))
        if "optimizer_state" in meta:
            model.optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.clip)
            model.optimizer.load_state({k: v.astype(dt) for k, v in opt_arrays.items()}, meta["optimizer_state"])
        return model


def program_accuracy(model: Seq2SeqParser, pairs: Sequence[QAPair]) -> dict[str, float]:
    """Operation / argument / function accuracy of greedy decodes, position by position."""
    n = op_ok = arg_ok = fn_ok = 0
    exact = 0
    for p in pairs:
        gold = [function_tokens(f) for f in p.program]
        pred = model.decode(p.tokens)
        for k, (go, ga) in enumerate(gold):
            po, pa = pred[k] if k < len(pred) else (None, None)
            n += 1
            op_ok += po == go
            arg_ok += pa == ga
            fn_ok += po == go and pa == ga
        exact += pred == gold
    return {"operation": op_ok / n, "argument": arg_ok / n, "function": fn_ok / n,
            "program": exact / len(pairs)}


def grad_check(model: Seq2SeqParser, sample: Sequence[QAPair], epsilon: float = 1e-5, seed: int = 0,
               entries_per_block: int = 20) -> dict[str, float]:
    """Max relative error of the analytic gradient per parameter block (W_A excluded).

    The finite differences are taken on an extended-precision copy of the model,
    so their rounding noise sits well below the tolerance being checked.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-6, 1e-4]")
    batch = model.make_batch(sample)
    _, G = model.loss_and_grad(batch)
    ref = Seq2SeqParser(ParserConfig(**{**asdict(model.config), "dtype": "longdouble"}),
                        model.qv, model.ov, model.av,
                        {k: v.astype(np.longdouble) for k, v in model.params.items()})
    ref_batch = ref.make_batch(sample)
    return finite_difference_check(lambda: ref.loss(ref_batch), ref.params, G, model.trainable(),
                                   epsilon, np.random.default_rng(seed), entries_per_block)
