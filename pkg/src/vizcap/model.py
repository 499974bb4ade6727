"""Multimodal copy transformer.

Image rows, OCR token rows and object rows are projected into a joint
space, concatenated and encoded with pre-LN self-attention.  The decoder
cross-attends to the encoder memory and scores three channels at every
step: the fixed caption vocabulary, the OCR slots and the object slots.
A single softmax over the concatenated unmasked logits gives each surface
token the sum of its channels' exponentials over one normalizer.

Extended ids are laid out as ``[caption vocab | OCR slots | OBJ slots]``
with the slot counts fixed by the channel limits, so every model built
from the same vocabulary and limits shares one id space.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import tensor as T
from .tensor import Tensor, no_grad
from .text import BOS, EOS, PAD, TokenizerVocab, merge_pieces

IMG, OCR, OBJ = "IMG", "OCR", "OBJ"


class VocabularyMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_mult: int = 2
    max_decode_len: int = 20
    copy_enabled: bool = True
    use_ocr: bool = True
    use_obj: bool = True
    dropout: float = 0.1
    n_pixel: int = 16
    img_dim: int = 32
    txt_dim: int = 32
    max_ocr: int = 20
    max_obj: int = 10
    vocab_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be >= 1")
        if min(self.encoder_layers, self.decoder_layers) < 0:
            raise ValueError("layer counts must be nonnegative")


# -- per-example inputs ------------------------------------------------------


@dataclass
class ModalityBundle:
    """One image's three channels: feature grid, ranked OCR, filtered objects."""
    img: np.ndarray
    ocr_tokens: list = field(default_factory=list)
    ocr_emb: np.ndarray | None = None
    obj_tokens: list = field(default_factory=list)
    obj_emb: np.ndarray | None = None


class DynamicVocabulary:
    """Caption vocabulary extended with one example's OCR and OBJ tokens.

    ``canonical[i]`` is the id that carries the merged probability of the
    surface form of extended id ``i``: the caption-vocabulary id when the
    surface is a caption word, otherwise the lowest slot with that surface.
    """

    def __init__(self, base: TokenizerVocab, ocr_tokens, obj_tokens, max_ocr: int, max_obj: int):
        if len(ocr_tokens) > max_ocr or len(obj_tokens) > max_obj:
            raise ValueError("more extension tokens than slots")
        self.base = base
        self.ocr = [t.strip().lower() for t in ocr_tokens]
        self.obj = [t.strip().lower() for t in obj_tokens]
        self.max_ocr = max_ocr
        self.max_obj = max_obj
        V = len(base)
        self.size = V + max_ocr + max_obj
        canonical = np.arange(self.size)
        first_slot: dict[str, int] = {}
        for i in range(V, self.size):
            s = self.slot_surface(i)
            if s is None:
                continue
            if s in base.stoi and s not in (PAD, BOS, EOS):
                canonical[i] = base.stoi[s]
            elif s in first_slot:
                canonical[i] = first_slot[s]
            else:
                first_slot[s] = i
        self.canonical = canonical
        self._first_slot = first_slot

    @property
    def base_size(self) -> int:
        return len(self.base)

    def slot_surface(self, idx: int) -> str | None:
        V = len(self.base)
        if V <= idx < V + self.max_ocr:
            k = idx - V
            return self.ocr[k] if k < len(self.ocr) else None
        if V + self.max_ocr <= idx < self.size:
            k = idx - V - self.max_ocr
            return self.obj[k] if k < len(self.obj) else None
        return None

    def surface(self, idx: int) -> str:
        if not 0 <= idx < self.size:
            raise IndexError(f"extended id {idx} outside [0, {self.size})")
        if idx < len(self.base):
            return self.base.token(idx)
        s = self.slot_surface(idx)
        if s is None:
            raise IndexError(f"extended id {idx} is an unoccupied slot")
        return s

    def occupied(self, ocr: bool = True, obj: bool = True) -> np.ndarray:
        V = len(self.base)
        mask = np.zeros(self.size, dtype=bool)
        if ocr:
            mask[V:V + len(self.ocr)] = True
        if obj:
            mask[V + self.max_ocr:V + self.max_ocr + len(self.obj)] = True
        return mask

    def word_id(self, word: str, copy: bool = True) -> int | None:
        """Canonical id of a whole word, or None if neither vocabulary has it."""
        if word in self.base.stoi and word not in (PAD, BOS, EOS):
            return self.base.stoi[word]
        if copy:
            return self._first_slot.get(word)
        return None


def fused_distribution(phi_img, phi_ocr, phi_obj, dyn: DynamicVocabulary,
                       copy_enabled: bool = True, base_mask=None) -> np.ndarray:
    """Probability of every extended id, with duplicate surfaces merged.

    ``phi_ocr``/``phi_obj`` have one logit per slot; slots without a
    detection are excluded.  The merged mass of a surface sits on its
    canonical id; other ids of that surface get exactly 0.
    """
    phi_img = np.asarray(phi_img, dtype=np.float64)
    logits = np.concatenate([phi_img, np.asarray(phi_ocr, dtype=np.float64),
                             np.asarray(phi_obj, dtype=np.float64)])
    if logits.shape != (dyn.size,):
        raise ValueError(f"expected {dyn.size} logits, got {logits.shape}")
    keep = np.zeros(dyn.size, dtype=bool)
    keep[:dyn.base_size] = True if base_mask is None else base_mask
    if copy_enabled:
        keep |= dyn.occupied()
    if not keep.any():
        raise ValueError("every channel is masked")
    p = T._masked_softmax_np(logits, keep, -1)
    merged = np.zeros_like(p)
    np.add.at(merged, dyn.canonical, p)
    return merged


def copy_scores(state, slot_embeddings, w_query, w_key, n_occupied: int):
    """Scaled dot-product copy logits and the occupancy mask for ``k`` slots."""
    state = np.asarray(state)
    q = state @ w_query
    keys = np.asarray(slot_embeddings) @ w_key
    phi = keys @ q / np.sqrt(q.shape[-1])
    mask = np.arange(len(phi)) < n_occupied
    return phi, mask


@dataclass
class CaptionHypothesis:
    token_ids: list
    step_probs: list
    surface: str = ""


# -- the network -------------------------------------------------------------


@dataclass
class Batch:
    img: np.ndarray        # [B, P, img_dim]
    ocr_emb: np.ndarray    # [B, max_ocr, txt_dim]
    obj_emb: np.ndarray    # [B, max_obj, txt_dim]
    ocr_n: np.ndarray      # [B]
    obj_n: np.ndarray      # [B]
    dyns: list

    def __len__(self):
        return len(self.dyns)


def make_batch(bundles, vocab: TokenizerVocab, config: ModelConfig) -> Batch:
    B = len(bundles)
    img = np.zeros((B, config.n_pixel, config.img_dim))
    ocr = np.zeros((B, config.max_ocr, config.txt_dim))
    obj = np.zeros((B, config.max_obj, config.txt_dim))
    ocr_n = np.zeros(B, dtype=np.int64)
    obj_n = np.zeros(B, dtype=np.int64)
    dyns = []
    for b, bd in enumerate(bundles):
        if bd.img.shape != (config.n_pixel, config.img_dim):
            raise ValueError(f"image grid {bd.img.shape} != {(config.n_pixel, config.img_dim)}")
        img[b] = bd.img
        ot, bt = list(bd.ocr_tokens)[:config.max_ocr], list(bd.obj_tokens)[:config.max_obj]
        for arr, emb, toks, out in ((ocr, bd.ocr_emb, ot, ocr_n), (obj, bd.obj_emb, bt, obj_n)):
            if toks:
                emb = np.asarray(emb)
                if emb.shape[1] != config.txt_dim:
                    raise ValueError(f"text embedding dim {emb.shape[1]} != {config.txt_dim}")
                arr[b, :len(toks)] = emb[:len(toks)]
            out[b] = len(toks)
        dyns.append(DynamicVocabulary(vocab, ot, bt, config.max_ocr, config.max_obj))
    return Batch(img, ocr, obj, ocr_n, obj_n, dyns)


class CaptionModel:
    def __init__(self, config: ModelConfig, vocab: TokenizerVocab, dtype=np.float32):
        if config.vocab_size == 0:
            config.vocab_size = len(vocab)
        if config.vocab_size != len(vocab):
            raise VocabularyMismatch(f"config vocab_size {config.vocab_size} != {len(vocab)}")
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed), dtype)

    # -- parameters --------------------------------------------------------

    def _add(self, name, arr, dtype):
        self.params[name] = T.parameter(arr, dtype)

    def _linear(self, rng, name, n_in, n_out, dtype, bias=True):
        self._add(name + ".W", rng.normal(0, 1 / np.sqrt(n_in), (n_in, n_out)), dtype)
        if bias:
            self._add(name + ".b", np.zeros(n_out), dtype)

    def _ln(self, name, d, dtype):
        self._add(name + ".g", np.ones(d), dtype)
        self._add(name + ".b", np.zeros(d), dtype)

    def _attn(self, rng, name, d, dtype):
        for w in ("q", "k", "v", "o"):
            self._linear(rng, f"{name}.{w}", d, d, dtype, bias=(w == "o"))

    def _init_params(self, rng, dtype):
        c = self.config
        d, V = c.d, c.vocab_size
        self._linear(rng, "img_proj", c.img_dim, d, dtype)
        self._linear(rng, "ocr_proj", c.txt_dim, d, dtype)
        self._linear(rng, "obj_proj", c.txt_dim, d, dtype)
        self._add("img_pos", rng.normal(0, 0.1, (c.n_pixel, d)), dtype)
        self._add("ocr_rank", rng.normal(0, 0.1, (c.max_ocr, d)), dtype)
        self._add("obj_rank", rng.normal(0, 0.1, (c.max_obj, d)), dtype)
        self._add("type_emb", rng.normal(0, 0.1, (3, d)), dtype)
        for layer in range(c.encoder_layers):
            p = f"enc.{layer}"
            self._ln(p + ".ln1", d, dtype)
            self._attn(rng, p + ".self", d, dtype)
            self._ln(p + ".ln2", d, dtype)
            self._linear(rng, p + ".ff1", d, d * c.ff_mult, dtype)
            self._linear(rng, p + ".ff2", d * c.ff_mult, d, dtype)
        self._ln("enc.ln_f", d, dtype)
        self._add("tok_emb", rng.normal(0, 0.1, (V, d)), dtype)
        self._add("dec_pos", rng.normal(0, 0.1, (c.max_decode_len, d)), dtype)
        self._add("ext_type", rng.normal(0, 0.1, (2, d)), dtype)
        for layer in range(c.decoder_layers):
            p = f"dec.{layer}"
            self._ln(p + ".ln1", d, dtype)
            self._attn(rng, p + ".self", d, dtype)
            self._ln(p + ".ln2", d, dtype)
            self._attn(rng, p + ".cross", d, dtype)
            self._ln(p + ".ln3", d, dtype)
            self._linear(rng, p + ".ff1", d, d * c.ff_mult, dtype)
            self._linear(rng, p + ".ff2", d * c.ff_mult, d, dtype)
        self._ln("dec.ln_f", d, dtype)
        self._linear(rng, "out", d, V, dtype)
        self._linear(rng, "copy.q", d, d, dtype, bias=False)
        self._linear(rng, "copy.k", d, d, dtype, bias=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "CaptionModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- building blocks ---------------------------------------------------

    def _lin(self, x, name):
        y = x @ self.params[name + ".W"]
        b = self.params.get(name + ".b")
        return y + b if b is not None else y

    def _norm(self, x, name):
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _attention(self, xq, xkv, name, mask, return_weights=False):
        c = self.config
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        h, dh = c.heads, d // c.heads

        def split(x, n):
            return x.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        q = split(self._lin(xq, name + ".q"), Tq)
        k = split(self._lin(xkv, name + ".k"), Tk)
        v = split(self._lin(xkv, name + ".v"), Tk)
        scores = (q @ T.swap_last(k)) * (1.0 / np.sqrt(dh))
        weights = T.masked_softmax(scores, mask, axis=-1)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        out = self._lin(out, name + ".o")
        return (out, weights) if return_weights else out

    def _ff(self, x, name, rng):
        hdn = T.gelu(self._lin(x, name + ".ff1"))
        return T.dropout(self._lin(hdn, name + ".ff2"), self.config.dropout, rng)

    # -- encoder -------------------------------------------------------------

    def project_and_concat(self, batch: Batch):
        """Joint-space rows ``[IMG | OCR slots | OBJ slots]``, key mask and segment labels."""
        c = self.config
        dt = self.dtype
        img = self._lin(Tensor(batch.img.astype(dt)), "img_proj") + self.params["img_pos"]
        img = img + self.params["type_emb"][0]
        ocr_p = self._lin(Tensor(batch.ocr_emb.astype(dt)), "ocr_proj")
        obj_p = self._lin(Tensor(batch.obj_emb.astype(dt)), "obj_proj")
        ocr = ocr_p + self.params["ocr_rank"] + self.params["type_emb"][1]
        obj = obj_p + self.params["obj_rank"] + self.params["type_emb"][2]
        seq = T.concat([img, ocr, obj], axis=1)
        B = len(batch)
        mask = np.zeros((B, seq.shape[1]), dtype=bool)
        mask[:, :c.n_pixel] = True
        if c.use_ocr:
            mask[:, c.n_pixel:c.n_pixel + c.max_ocr] = np.arange(c.max_ocr) < batch.ocr_n[:, None]
        if c.use_obj:
            mask[:, c.n_pixel + c.max_ocr:] = np.arange(c.max_obj) < batch.obj_n[:, None]
        segments = [IMG] * c.n_pixel + [OCR] * c.max_ocr + [OBJ] * c.max_obj
        return seq, mask, segments, (ocr_p, obj_p)

    def encode(self, batch: Batch, rng=None):
        seq, mask, _, projected = self.project_and_concat(batch)
        x = T.dropout(seq, self.config.dropout, rng)
        attn_mask = mask[:, None, None, :]
        for layer in range(self.config.encoder_layers):
            p = f"enc.{layer}"
            x = x + T.dropout(self._attention(self._norm(x, p + ".ln1"), self._norm(x, p + ".ln1"),
                                              p + ".self", attn_mask), self.config.dropout, rng)
            x = x + self._ff(self._norm(x, p + ".ln2"), p, rng)
        return self._norm(x, "enc.ln_f"), mask, projected

    # -- decoder -------------------------------------------------------------

    def _input_embeddings(self, ids: np.ndarray, projected):
        """Caption ids use the token table; slot ids reuse their projected detection."""
        c = self.config
        V = c.vocab_size
        is_base = ids < V
        base = T.embedding(self.params["tok_emb"], np.where(is_base, ids, 0))
        base = base * is_base[..., None].astype(self.dtype)
        if is_base.all():
            return base
        ocr_p, obj_p = projected
        ext = T.concat([ocr_p + self.params["ext_type"][0], obj_p + self.params["ext_type"][1]], axis=1)
        K = c.max_ocr + c.max_obj
        onehot = np.zeros(ids.shape + (K,), dtype=self.dtype)
        bi, ti = np.nonzero(~is_base)
        onehot[bi, ti, ids[bi, ti] - V] = 1.0
        return base + Tensor(onehot) @ ext

    def decode_logits(self, memory, mem_mask, projected, inp_ids: np.ndarray, rng=None):
        """Concatenated unnormalized logits ``[B, T, V + max_ocr + max_obj]``."""
        c = self.config
        B, Tn = inp_ids.shape
        if Tn > c.max_decode_len:
            raise ValueError(f"decoder input length {Tn} exceeds max_decode_len {c.max_decode_len}")
        x = self._input_embeddings(inp_ids, projected) + self.params["dec_pos"][:Tn]
        x = T.dropout(x, c.dropout, rng)
        causal = np.tril(np.ones((Tn, Tn), dtype=bool))[None, None]
        cross_mask = mem_mask[:, None, None, :]
        for layer in range(c.decoder_layers):
            p = f"dec.{layer}"
            h = self._norm(x, p + ".ln1")
            x = x + T.dropout(self._attention(h, h, p + ".self", causal), c.dropout, rng)
            x = x + T.dropout(self._attention(self._norm(x, p + ".ln2"), memory, p + ".cross",
                                              cross_mask), c.dropout, rng)
            x = x + self._ff(self._norm(x, p + ".ln3"), p, rng)
        h = self._norm(x, "dec.ln_f")
        phi_img = self._lin(h, "out")
        q = h @ self.params["copy.q.W"]
        slots = memory[:, c.n_pixel:, :]
        keys = slots @ self.params["copy.k.W"]
        phi_copy = (q @ T.swap_last(keys)) * (1.0 / np.sqrt(c.d))
        return T.concat([phi_img, phi_copy], axis=-1)

    def valid_mask(self, batch: Batch) -> np.ndarray:
        """[B, Vext] positions that may receive probability."""
        c = self.config
        V = c.vocab_size
        out = np.zeros((len(batch), V + c.max_ocr + c.max_obj), dtype=bool)
        out[:, :V] = True
        out[:, self.vocab.pad_id] = False
        out[:, self.vocab.bos_id] = False
        if c.copy_enabled:
            for b, dyn in enumerate(batch.dyns):
                out[b] |= dyn.occupied(ocr=c.use_ocr, obj=c.use_obj)
        return out

    def canonical(self, batch: Batch) -> np.ndarray:
        return np.stack([dyn.canonical for dyn in batch.dyns])

    def merged_probs(self, logits: np.ndarray, valid: np.ndarray, canon: np.ndarray) -> np.ndarray:
        """Merged surface probabilities from raw logits ``[B, Vext]``."""
        p = T._masked_softmax_np(logits.astype(np.float64), valid, -1)
        merged = np.zeros_like(p)
        rows = np.repeat(np.arange(p.shape[0])[:, None], p.shape[1], axis=1)
        np.add.at(merged, (rows, canon), p)
        return merged

    def sequence_log_probs(self, batch: Batch, inputs: np.ndarray, targets: np.ndarray, rng=None):
        """log p of each target canonical id under teacher forcing: ``[B, T]`` tensor.

        Positions whose target is the pad id get log p = 0.
        """
        memory, mem_mask, projected = self.encode(batch, rng)
        logits = self.decode_logits(memory, mem_mask, projected, inputs, rng)
        valid = self.valid_mask(batch)[:, None, :]
        canon = self.canonical(batch)
        real = targets != self.vocab.pad_id
        group = (canon[:, None, :] == targets[:, :, None]) & valid
        group = np.where(real[..., None], group, valid)
        return T.masked_logsumexp(logits, group) - T.masked_logsumexp(logits, np.broadcast_to(valid, logits.shape))

    # -- serialization -----------------------------------------------------

    def manifest(self) -> dict:
        return {"format": "vizcap-model", "version": 1, "config": asdict(self.config),
                "vocab_sha256": self.vocab.digest(), "params": list(self.params)}

    def save(self, directory, optimizer=None, extra: dict | None = None) -> None:
        os.makedirs(directory, exist_ok=True)
        container.save(os.path.join(directory, "model.bin"),
                       {k: p.data for k, p in self.params.items()})
        self.vocab.save(os.path.join(directory, "vocab.txt"))
        man = self.manifest()
        if extra:
            man.update(extra)
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
        if optimizer is not None:
            container.save(os.path.join(directory, "optim.bin"), optimizer.state_tensors())

    @classmethod
    def load(cls, directory) -> "CaptionModel":
        with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
            man = json.load(fh)
        vocab = TokenizerVocab.load(os.path.join(directory, "vocab.txt"))
        if vocab.digest() != man["vocab_sha256"]:
            raise VocabularyMismatch(f"{directory}: vocabulary hash does not match manifest")
        model = cls(ModelConfig(**man["config"]), vocab)
        tensors = container.load(os.path.join(directory, "model.bin"))
        if set(tensors) != set(model.params):
            raise ValueError(f"{directory}: parameter names differ from the model layout")
        for k, p in model.params.items():
            if tensors[k].shape != p.shape:
                raise ValueError(f"{directory}: {k} has shape {tensors[k].shape}, expected {p.shape}")
            p.data = tensors[k].astype(p.dtype)
        return model


def check_compatible(models) -> None:
    first = models[0]
    for m in models[1:]:
        same = (m.vocab.digest() == first.vocab.digest()
                and m.config.max_ocr == first.config.max_ocr
                and m.config.max_obj == first.config.max_obj)
        if not same:
            raise VocabularyMismatch("ensemble members disagree on vocabulary or slot layout")


# -- decoding ----------------------------------------------------------------


def draw_tokens(dist: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row of ``dist`` ``[B, V]``."""
    B = dist.shape[0]
    u = rng.random(B)
    cdf = np.cumsum(dist, axis=1)
    nxt = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), dist.shape[1] - 1)
    # never land on a zero-mass id from rounding at the cdf edge
    zero = dist[np.arange(B), nxt] == 0
    if zero.any():
        nxt[zero] = dist[zero].argmax(axis=1)
    return nxt


def _decode(models, batch: Batch, max_len: int | None, sample: bool, rng_seed: int | None):
    check_compatible(models)
    vocab = models[0].vocab
    max_len = max_len or min(m.config.max_decode_len for m in models)
    max_len = min(max_len, *(m.config.max_decode_len for m in models))
    B = len(batch)
    rng = np.random.default_rng(rng_seed) if sample else None
    with no_grad():
        encoded = [m.encode(batch) for m in models]
        valids = [m.valid_mask(batch) for m in models]
    canon = models[0].canonical(batch)
    ids = np.full((B, 1), vocab.bos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    tokens = [[] for _ in range(B)]
    probs = [[] for _ in range(B)]
    step_dists = []
    for _ in range(max_len):
        dist = np.zeros((B, canon.shape[1]))
        with no_grad():
            for m, (mem, mask, proj), valid in zip(models, encoded, valids):
                logits = m.decode_logits(mem, mask, proj, ids).data[:, -1, :]
                dist += m.merged_probs(logits, valid, canon)
        dist /= len(models)
        step_dists.append(dist)
        nxt = draw_tokens(dist, rng) if sample else dist.argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            tokens[b].append(int(nxt[b]))
            probs[b].append(float(dist[b, nxt[b]]))
            if nxt[b] == vocab.eos_id:
                done[b] = True
        if done.all():
            break
        ids = np.concatenate([ids, np.where(done, vocab.pad_id, nxt)[:, None]], axis=1)
        ids[done, -1] = vocab.eos_id
    hyps = []
    for b in range(B):
        hyps.append(CaptionHypothesis(tokens[b], probs[b], detokenize(tokens[b], batch.dyns[b])))
    return hyps, step_dists


def greedy_decode(model: CaptionModel, batch: Batch, max_len: int | None = None):
    return _decode([model], batch, max_len, sample=False, rng_seed=None)[0]


def sample_decode(model: CaptionModel, batch: Batch, max_len: int | None = None, rng_seed: int = 0):
    return _decode([model], batch, max_len, sample=True, rng_seed=rng_seed)[0]


def ensemble_decode(models, batch: Batch, max_len: int | None = None):
    """Average member distributions at each step, then take the argmax."""
    return _decode(list(models), batch, max_len, sample=False, rng_seed=None)[0]


def detokenize(token_ids, dyn: DynamicVocabulary) -> str:
    """Surface string of extended ids; stops at EOS, glues ``##`` pieces."""
    words = []
    eos = dyn.base.eos_id
    for idx in token_ids:
        idx = int(idx)
        if idx == eos:
            break
        if idx in (dyn.base.pad_id, dyn.base.bos_id):
            continue
        words.append(dyn.surface(idx))
    return merge_pieces(words)
