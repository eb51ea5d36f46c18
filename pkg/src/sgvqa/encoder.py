"""Cross-modality transformer encoder driven by the executor's object selections.

Language tokens and object regions are embedded separately, passed through
single-modality self-attention stacks, then through cross layers that let each
modality attend to the other. Every sub-layer is wrapped as
``LayerNorm(x + sublayer(x))``.

During a layout run the language states are threaded through one encoder call
per object-producing function; the regions shown to each call are the
executor's current selection. Only the language output is carried forward. The
answer head reads the final state of a sentinel token prepended to the question.

All backward passes are written by hand. Each forward helper returns its output
together with a closure that maps the output gradient to input gradients and
accumulates parameter gradients into a shared dict.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .executor import LENIENT, ObjList, Trace, execute
from .nn import (
    DimensionMismatch,
    NonFiniteLoss,
    finite_difference_check,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    softmax,
    softmax_backward,
)
from .program import Program, selected_layout
from .scene_graph import Ontology, SceneGraph, UnknownObject

SENTINEL, UNK = "<ans>", "<unk>"


class EmptySelection(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class EncoderConfig:
    n_language: int = 9
    n_cross: int = 5
    n_vision: int = 5
    dim: int = 768
    heads: int = 12
    ff_dim: int = 3072
    feature_dim: int = 2048
    max_tokens: int = 24
    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 4
    optimizer: str = "adam"
    clip: float = 5.0
    seed: int = 0
    dtype: str = "float64"
    post_selection: bool = False

    def __post_init__(self):
        if min(self.n_language, self.n_cross, self.n_vision, self.dim, self.heads) < 1:
            raise ValueError("layer counts and dims must be >= 1")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @classmethod
    def toy(cls, **overrides) -> EncoderConfig:
        base = dict(n_language=2, n_cross=1, n_vision=1, dim=32, heads=4, ff_dim=64, feature_dim=32,
                    learning_rate=1e-3, batch_size=16, epochs=8)
        base.update(overrides)
        return cls(**base)


def position_feature(graph: SceneGraph, object_id: str) -> np.ndarray:
    b = graph[object_id].box
    return np.array([b.x, b.y, b.x + b.w, b.y + b.h, b.w * b.h])


# ---------------------------------------------------------------------------
# differentiable pieces


class _Net:
    """Forward helpers over a parameter dict; gradients go to ``self.grads``."""

    def __init__(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray] | None,
                 record: list | None = None):
        self.P = params
        self.G = grads
        self.record = record

    def _acc(self, name, value):
        if self.G is not None:
            self.G[name] += value

    def linear(self, name, x):
        W, b = self.P[name + ".W"], self.P[name + ".b"]
        if x.shape[-1] != W.shape[0]:
            raise DimensionMismatch(f"{name}: input dim {x.shape[-1]} vs weight {W.shape}")

        def back(dy):
            self._acc(name + ".W", x.T @ dy)
            self._acc(name + ".b", dy.sum(0))
            return dy @ W.T

        return x @ W + b, back

    def norm(self, name, x):
        gamma = self.P[name + ".g"]
        y, xhat, inv = layer_norm(x, gamma, self.P[name + ".b"])
        if self.record is not None:
            self.record.append(("ln", name, xhat))

        def back(dy):
            dx, dg, db = layer_norm_backward(dy, xhat, inv, gamma)
            self._acc(name + ".g", dg)
            self._acc(name + ".b", db)
            return dx

        return y, back

    def attention(self, name, xq, xkv, heads):
        """Multi-head scaled dot-product attention of ``xq`` rows over ``xkv`` rows."""
        q, bq = self.linear(name + ".q", xq)
        k, bk = self.linear(name + ".k", xkv)
        v, bv = self.linear(name + ".v", xkv)
        n, m, d = xq.shape[0], xkv.shape[0], q.shape[1]
        dh = d // heads
        Q = q.reshape(n, heads, dh).transpose(1, 0, 2)
        K = k.reshape(m, heads, dh).transpose(1, 0, 2)
        V = v.reshape(m, heads, dh).transpose(1, 0, 2)
        scale = 1.0 / math.sqrt(dh)
        A = softmax(Q @ K.transpose(0, 2, 1) * scale, axis=-1)
        if self.record is not None:
            self.record.append(("attn", name, A))
        O = (A @ V).transpose(1, 0, 2).reshape(n, d)
        out, bo = self.linear(name + ".o", O)

        def back(dout):
            dO = bo(dout).reshape(n, heads, dh).transpose(1, 0, 2)
            dA = dO @ V.transpose(0, 2, 1)
            dV = A.transpose(0, 2, 1) @ dO
            dS = softmax_backward(A, dA, axis=-1) * scale
            dQ = dS @ K
            dK = dS.transpose(0, 2, 1) @ Q
            dxq = bq(dQ.transpose(1, 0, 2).reshape(n, d))
            dxkv = bk(dK.transpose(1, 0, 2).reshape(m, d)) + bv(dV.transpose(1, 0, 2).reshape(m, d))
            return dxq, dxkv

        return out, back

    def att_block(self, name, x, ctx, heads):
        """LayerNorm(x + Att(x, ctx)); ``ctx is x`` for self-attention."""
        a, ba = self.attention(name + ".att", x, ctx, heads)
        y, bn = self.norm(name + ".ln", x + a)

        def back(dy):
            ds = bn(dy)
            dx_att, dctx = ba(ds)
            return ds + dx_att, dctx

        return y, back

    def ff_block(self, name, x):
        z, b1 = self.linear(name + ".ff1", x)
        a = gelu(z)
        f, b2 = self.linear(name + ".ff2", a)
        y, bn = self.norm(name + ".ln", x + f)

        def back(dy):
            ds = bn(dy)
            return ds + b1(b2(ds) * gelu_grad(z))

        return y, back

    def self_layer(self, name, x, heads):
        y1, b1 = self.att_block(name + ".self", x, x, heads)
        y2, b2 = self.ff_block(name + ".ff", y1)

        def back(dy):
            dx1, dctx = b1(b2(dy))
            return dx1 + dctx

        return y2, back


# ---------------------------------------------------------------------------


@dataclass
class LayoutResult:
    probs: np.ndarray
    trace: list[dict]
    encode_calls: int
    flags: list[str]
    symbolic: Trace
    backward: Callable | None = None


@dataclass
class Example:
    tokens: list[str]
    program: Program
    graph: SceneGraph
    features: Mapping[str, np.ndarray]
    answer: str


@dataclass
class EncoderTrainResult:
    losses: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)


class CrossModalEncoder:
    def __init__(self, config: EncoderConfig, words: Sequence[str], answers: Sequence[str],
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.words = [SENTINEL, UNK] + [w for w in dict.fromkeys(words) if w not in (SENTINEL, UNK)]
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.answers = list(dict.fromkeys(answers))
        self.answer_index = {a: i for i, a in enumerate(self.answers)}
        self.dtype = np.dtype(config.dtype)
        self.params = params if params is not None else self._init_params()
        self.epoch = 0
        self.optimizer = None

    # -- parameters -----------------------------------------------------------

    def _init_params(self):
        c = self.config
        rng = np.random.default_rng(c.seed)
        d, dt = c.dim, self.dtype
        P: dict[str, np.ndarray] = {}

        def lin(name, n_in, n_out):
            P[name + ".W"] = (rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)).astype(dt)
            P[name + ".b"] = np.zeros(n_out, dtype=dt)

        def ln(name, n=d):
            P[name + ".g"] = np.ones(n, dtype=dt)
            P[name + ".b"] = np.zeros(n, dtype=dt)

        def att(name):
            for part in "qkvo":
                lin(f"{name}.att.{part}", d, d)
            ln(name + ".ln")

        def ff(name):
            lin(name + ".ff1", d, c.ff_dim)
            lin(name + ".ff2", c.ff_dim, d)
            ln(name + ".ln")

        P["word_embed"] = (rng.standard_normal((len(self.words), d)) * 0.5).astype(dt)
        P["index_embed"] = (rng.standard_normal((c.max_tokens + 1, d)) * 0.5).astype(dt)
        ln("word_ln")
        lin("feat_proj", c.feature_dim, d)
        ln("feat_ln")
        lin("pos_proj", 5, d)
        ln("pos_ln")
        for k in range(c.n_language):
            att(f"lang{k}.self")
            ff(f"lang{k}.ff")
        for k in range(c.n_vision):
            att(f"vis{k}.self")
            ff(f"vis{k}.ff")
        for k in range(c.n_cross):
            att(f"cross{k}.l2r")
            att(f"cross{k}.r2l")
            att(f"cross{k}.lself")
            att(f"cross{k}.vself")
            ff(f"cross{k}.lff")
            ff(f"cross{k}.vff")
        lin("head.fc", d, d)
        ln("head.ln")
        lin("head.out", d, len(self.answers))
        return P

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- embeddings -------------------------------------------------------------

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) > self.config.max_tokens:
            raise ValueError(f"question longer than {self.config.max_tokens} tokens")
        return np.array([0] + [self.word_index.get(t, 1) for t in tokens])

    def _embed_question(self, net: _Net, tokens: Sequence[str]):
        ids = self.token_ids(tokens)
        x = self.params["word_embed"][ids] + self.params["index_embed"][: len(ids)]
        h, bn = net.norm("word_ln", x)

        def back(dh):
            dx = bn(dh)
            if net.G is not None:
                np.add.at(net.G["word_embed"], ids, dx)
                net.G["index_embed"][: len(ids)] += dx
            return None

        return h, back

    def embed_question(self, tokens: Sequence[str], record: list | None = None) -> np.ndarray:
        """L_0: LayerNorm(word + index embedding) with the sentinel at position 0.

        An empty token list yields the sentinel alone.
        """
        return self._embed_question(_Net(self.params, None, record), tokens)[0]

    def _embed_objects(self, net: _Net, graph: SceneGraph, ids: Sequence[str], features: Mapping[str, np.ndarray]):
        if not ids:
            raise EmptySelection("no objects to embed")
        for oid in ids:
            if oid not in graph.objects or oid not in features:
                raise UnknownObject(oid)
        r = np.stack([features[oid] for oid in ids]).astype(self.dtype)
        p = np.stack([position_feature(graph, oid) for oid in ids]).astype(self.dtype)
        fr, bfr = net.linear("feat_proj", r)
        rh, brn = net.norm("feat_ln", fr)
        fp, bfp = net.linear("pos_proj", p)
        ph, bpn = net.norm("pos_ln", fp)

        def back(dv):
            bfr(brn(dv / 2))
            bfp(bpn(dv / 2))
            return None

        return (rh + ph) / 2, back

    def embed_objects(self, graph: SceneGraph, ids: Sequence[str], features: Mapping[str, np.ndarray],
                      record: list | None = None) -> np.ndarray:
        """v_j = (LN(W_F r_j + b_F) + LN(W_P p_j + b_P)) / 2 for each selected id."""
        return self._embed_objects(_Net(self.params, None, record), graph, ids, features)[0]

    # -- encoder stack ------------------------------------------------------------

    def _encode(self, net: _Net, V, L):
        c = self.config
        if V.shape[-1] != c.dim or L.shape[-1] != c.dim:
            raise DimensionMismatch(f"encoder expects dim {c.dim}, got V {V.shape} L {L.shape}")
        if not len(V) or not len(L):
            raise EmptyInput("encode needs at least one region and one token")
        backs = []
        for k in range(c.n_language):
            L, b = net.self_layer(f"lang{k}", L, c.heads)
            backs.append(("L", b))
        for k in range(c.n_vision):
            V, b = net.self_layer(f"vis{k}", V, c.heads)
            backs.append(("V", b))
        for k in range(c.n_cross):
            L1, bl = net.att_block(f"cross{k}.l2r", L, V, c.heads)
            V1, bv = net.att_block(f"cross{k}.r2l", V, L, c.heads)
            backs.append(("X", bl, bv))
            L2, bls = net.att_block(f"cross{k}.lself", L1, L1, c.heads)
            V2, bvs = net.att_block(f"cross{k}.vself", V1, V1, c.heads)
            backs.append(("S", bls, bvs))
            L, blf = net.ff_block(f"cross{k}.lff", L2)
            V, bvf = net.ff_block(f"cross{k}.vff", V2)
            backs.append(("F", blf, bvf))

        def back(dV, dL):
            for entry in reversed(backs):
                kind = entry[0]
                if kind == "L":
                    dL = entry[1](dL)
                elif kind == "V":
                    dV = entry[1](dV)
                elif kind == "F":
                    dL, dV = entry[1](dL), entry[2](dV)
                elif kind == "S":
                    a, ca = entry[1](dL)
                    b, cb = entry[2](dV)
                    dL, dV = a + ca, b + cb
                else:
                    dl_q, dv_from_l = entry[1](dL)
                    dv_q, dl_from_v = entry[2](dV)
                    dL, dV = dl_q + dl_from_v, dv_q + dv_from_l
            return dV, dL

        return V, L, back

    def encode(self, V: np.ndarray, L: np.ndarray, record: list | None = None):
        """One pass of the full stack; returns (V_out, L_out)."""
        V_out, L_out, _ = self._encode(_Net(self.params, None, record), V, L)
        return V_out, L_out

    def _head(self, net: _Net, L):
        z, b1 = net.linear("head.fc", L[:1])
        a = gelu(z)
        n, bn = net.norm("head.ln", a)
        logits, b2 = net.linear("head.out", n)

        def back(dlogits):
            dL = np.zeros_like(L)
            dL[:1] = b1(bn(b2(dlogits)) * gelu_grad(z))
            return dL

        return logits[0], back

    # -- layout -----------------------------------------------------------------------

    def run_layout(self, program: Program, graph: SceneGraph, tokens: Sequence[str],
                   features: Mapping[str, np.ndarray], policy: str = LENIENT, ontology: Ontology | None = None,
                   symbolic: Trace | None = None, need_grad: bool = False,
                   record: list | None = None) -> LayoutResult:
        """Thread the question through one encoder call per selected function, plus a final call."""
        G = self.zero_grads() if need_grad else None
        net = _Net(self.params, G, record)
        if symbolic is None:
            symbolic = execute(program, graph, policy=policy, ontology=ontology)
        layout = selected_layout(program)

        L, back_q = self._embed_question(net, tokens)
        O = tuple(graph.objects)
        V, back_v = self._embed_objects(net, graph, O, features)
        trace = [{"step": 0, "function_idx": None, "object_ids": list(O), "encode_call_idx": 0, "fallback": False}]
        flags: list[str] = []
        chain = []  # (encode back, embed back of the V it consumed)
        pending = (V, back_v)
        for t, f in enumerate(layout):
            out = symbolic.steps[f.index].output
            assert isinstance(out, ObjList)
            O_next, fallback = out.ids, not out.ids
            if fallback:
                O_next = O
                flags.append(f"EmptySelection at function {f.index}: reusing the previous regions")
            V_next, back_next = self._embed_objects(net, graph, O_next, features)
            V_used, back_used = (V_next, back_next) if self.config.post_selection else pending
            _, L, back_enc = self._encode(net, V_used, L)
            chain.append((back_enc, back_used, V_used.shape))
            O, pending = O_next, (V_next, back_next)
            trace.append({"step": t + 1, "function_idx": f.index, "object_ids": list(O),
                          "encode_call_idx": t + 1, "fallback": fallback})
        V_last, back_last = pending
        _, L, back_enc = self._encode(net, V_last, L)
        chain.append((back_enc, back_last, V_last.shape))
        logits, back_head = self._head(net, L)
        probs = softmax(logits)

        result = LayoutResult(probs, trace, len(chain), flags, symbolic)
        if need_grad:
            def backward(dlogits):
                dL = back_head(dlogits)
                for back_enc, back_embed, vshape in reversed(chain):
                    dV, dL = back_enc(np.zeros(vshape, dtype=self.dtype), dL)
                    back_embed(dV)
                back_q(dL)
                return G

            result.backward = backward
        return result

    def predict(self, program, graph, tokens, features, **kw) -> str:
        res = self.run_layout(program, graph, tokens, features, **kw)
        return self.answers[int(np.argmax(res.probs))]

    # -- training -------------------------------------------------------------------------

    def loss_and_grad(self, example: Example, need_grad: bool = True):
        if example.answer not in self.answer_index:
            raise ValueError(f"answer {example.answer!r} outside the answer vocabulary")
        res = self.run_layout(example.program, example.graph, example.tokens, example.features, need_grad=need_grad)
        target = self.answer_index[example.answer]
        logits_probs = res.probs
        loss = -np.log(np.maximum(logits_probs[target], np.finfo(self.dtype).tiny))
        if not need_grad:
            return loss, None, res
        d = logits_probs.copy()
        d[target] -= 1
        G = res.backward(d[None, :])
        return loss, G, res

    def loss(self, example: Example):
        res = self.run_layout(example.program, example.graph, example.tokens, example.features)
        logits = np.log(np.maximum(res.probs, np.finfo(self.dtype).tiny))
        return -logits[self.answer_index[example.answer]]

    def train(self, examples: Sequence[Example], epochs: int | None = None, log=None,
              until_accuracy: float | None = None) -> EncoderTrainResult:
        """Minibatch training on answer cross-entropy; sample order is a pure function of (seed, epoch).

        With ``until_accuracy`` set, training stops after the first epoch whose
        running training accuracy reaches it.
        """
        if not examples:
            raise ValueError("empty training set")
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        if self.optimizer is None:
            self.optimizer = make_optimizer(c.optimizer, c.learning_rate, clip=c.clip)
        opt = self.optimizer
        result = EncoderTrainResult()
        for _ in range(epochs):
            epoch = self.epoch
            order = np.random.default_rng([c.seed, epoch]).permutation(len(examples))
            correct = 0
            for start in range(0, len(order), c.batch_size):
                chunk = order[start:start + c.batch_size]
                G_sum = None
                batch_loss = 0.0
                for i in chunk:
                    loss, G, res = self.loss_and_grad(examples[i])
                    if not np.isfinite(loss):
                        raise NonFiniteLoss(f"epoch {epoch}, example {i}: loss {loss}")
                    batch_loss += float(loss)
                    correct += self.answers[int(np.argmax(res.probs))] == examples[i].answer
                    if G_sum is None:
                        G_sum = G
                    else:
                        for k in G_sum:
                            G_sum[k] += G[k]
                for k in G_sum:
                    G_sum[k] /= len(chunk)
                if c.learning_rate != 0:
                    opt.step(self.params, G_sum)
                result.losses.append(batch_loss / len(chunk))
            result.train_accuracy.append(correct / len(examples))
            self.epoch += 1
            if log:
                log(f"epoch {epoch + 1}: loss {np.mean(result.losses[-max(1, len(order) // c.batch_size):]):.4f} "
                    f"train acc {result.train_accuracy[-1]:.4f}")
            if until_accuracy is not None and result.train_accuracy[-1] >= until_accuracy:
                break
        return result

    # -- persistence ------------------------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "encoder", "config": asdict(self.config), "words": self.words[2:], "answers": self.answers,
                "epoch": self.epoch}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.params, self.optimizer, meta)

    @classmethod
    def load(cls, path) -> CrossModalEncoder:
        params, opt_arrays, meta = load_checkpoint(path)
        cfg = EncoderConfig(**meta["config"])
        dt = np.dtype(cfg.dtype)
        model = cls(cfg, meta["words"], meta["answers"], {k: v.astype(dt) for k, v in params.items()})
        model.epoch = int(meta.get("epoch", 0))
        if "optimizer_state" in meta:
            model.optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate, clip=cfg.clip)
            model.optimizer.load_state({k: v.astype(dt) for k, v in opt_arrays.items()}, meta["optimizer_state"])
        return model

    def cast(self, dtype) -> CrossModalEncoder:
        cfg = EncoderConfig(**{**asdict(self.config), "dtype": np.dtype(dtype).name})
        return CrossModalEncoder(cfg, self.words[2:], self.answers,
                                 {k: v.astype(dtype) for k, v in self.params.items()})


def answer_vocabulary(ontology: Ontology) -> list[str]:
    out = ["yes", "no"]
    for values in ontology.attribute_categories.values():
        out += list(values)
    out += list(ontology.classes) + sorted(ontology.attribute_categories)
    out += ["left", "middle", "right", "top", "bottom", "none", "unknown"]
    return list(dict.fromkeys(out))


def grad_check(model: CrossModalEncoder, example: Example, epsilon: float = 1e-5, seed: int = 0,
               entries_per_block: int = 8) -> dict[str, float]:
    """Per-block relative error of analytic gradients against extended-precision central differences."""
    _, G, _ = model.loss_and_grad(example)
    ref = model.cast(np.longdouble)
    ex = Example(example.tokens, example.program, example.graph,
                 {k: np.asarray(v, dtype=np.longdouble) for k, v in example.features.items()}, example.answer)
    return finite_difference_check(lambda: ref.loss(ex), ref.params, G, list(model.params), epsilon,
                                   np.random.default_rng(seed), entries_per_block)
