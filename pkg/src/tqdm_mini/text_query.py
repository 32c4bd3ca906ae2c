"""Textual query generation: a frozen toy text encoder with a learnable prompt.

Class names are tokenized with a fixed word table, encoded together with a
prompt (learnable vectors, or the fixed template ``a clean origami of a``),
and the resulting text embeddings ``t`` (K x C) are mapped to initial object
queries (MLP) and to cluster centers for text-to-pixel attention (linear).
"""
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .attention import EncoderBlock
from .errors import ConfigError, VocabularyError

PAD, SOS, EOS = "[PAD]", "[SOS]", "[EOS]"
TEMPLATE = "a clean origami of a [class]."

# Order is part of the frozen encoder's identity: never reorder, only append.
_BUILTIN_WORDS = (
    PAD, SOS, EOS, ".", "a", "clean", "origami", "of", "photo", "the",
    # synthetic benchmark
    "background", "disc", "rectangle", "triangle", "stripe", "ring", "cross", "diamond",
    # cityscapes
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic", "light",
    "sign", "vegetation", "terrain", "sky", "person", "rider", "car", "truck",
    "bus", "train", "motorcycle", "bicycle",
)


def split_words(text):
    return text.replace(".", " . ").split()


class Tokenizer:
    """Word-level tokenizer over a fixed, append-only table."""

    def __init__(self, extra_words=(), capacity=256):
        self.capacity = capacity
        self._ids = {}
        for w in _BUILTIN_WORDS + tuple(extra_words):
            self.add(w)

    def add(self, word):
        if word not in self._ids:
            if len(self._ids) >= self.capacity:
                raise VocabularyError(f"tokenizer table full ({self.capacity}); cannot add {word!r}")
            self._ids[word] = len(self._ids)
        return self._ids[word]

    def __len__(self):
        return len(self._ids)

    def token_id(self, word):
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def encode(self, text):
        return [self.token_id(w) for w in split_words(text)]


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple
    token_ids: tuple = field(repr=False)

    def __post_init__(self):
        if len(self.names) < 1:
            raise ConfigError("vocabulary needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"duplicate class names in {self.names}")
        if any(len(ids) == 0 for ids in self.token_ids):
            raise ConfigError("every class name must tokenize to at least one token")

    @classmethod
    def from_names(cls, names, tokenizer=None):
        tokenizer = tokenizer or Tokenizer()
        names = tuple(names)
        return cls(names, tuple(tuple(tokenizer.encode(n)) for n in names))

    def __len__(self):
        return len(self.names)

    def permuted(self, perm):
        return ClassVocabulary(tuple(self.names[i] for i in perm), tuple(self.token_ids[i] for i in perm))


def read_vocabulary(path, tokenizer=None):
    """One class name per line, UTF-8; blank lines are skipped."""
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    return ClassVocabulary.from_names(names, tokenizer)


class FrozenTextEncoder(nn.Module):
    """Small transformer encoder with seeded weights and no trainable parameters.

    The text feature of a sequence is the ``[EOS]`` token after the final block,
    layer-normed and projected to the joint space.
    """

    def __init__(self, token_dim=64, embed_dim=64, depth=2, nhead=4, vocab_size=256,
                 max_len=32, seed=0):
        super().__init__()
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        self.max_len = max_len
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_embedding = nn.Embedding(vocab_size, token_dim)
            self.pos_embedding = nn.Parameter(torch.empty(max_len, token_dim))
            self.blocks = nn.ModuleList(EncoderBlock(token_dim, nhead) for _ in range(depth))
            self.norm = nn.LayerNorm(token_dim)
            self.proj = nn.Linear(token_dim, embed_dim, bias=False)
            nn.init.normal_(self.token_embedding.weight, std=0.02)
            nn.init.normal_(self.pos_embedding, std=0.01)
            nn.init.normal_(self.proj.weight, std=token_dim ** -0.5)
        self.requires_grad_(False)

    @property
    def vocab_size(self):
        return self.token_embedding.num_embeddings

    def embed_tokens(self, ids):
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabularyError(f"token id out of range [0, {self.vocab_size})")
        return self.token_embedding(ids)

    def forward(self, prefix, token_ids):
        """Encode ``[SOS] prefix tokens(class) . [EOS]`` for every class.

        ``prefix`` is a (P, token_dim) tensor shared by all classes.
        """
        if prefix.ndim != 2 or prefix.shape[1] != self.token_dim:
            raise ConfigError(f"prompt must be (P, {self.token_dim}), got {tuple(prefix.shape)}")
        sos, dot, eos = (self.embed_tokens([i]) for i in (1, 3, 2))
        seqs = [torch.cat([sos, prefix, self.embed_tokens(ids), dot, eos]) for ids in token_ids]
        lengths = [len(s) for s in seqs]
        n = max(lengths)
        if n > self.max_len:
            raise ConfigError(f"sequence length {n} exceeds encoder max_len {self.max_len}")
        x = torch.stack([F.pad(s, (0, 0, 0, n - len(s))) for s in seqs])
        x = x + self.pos_embedding[:n]
        lengths = torch.tensor(lengths)
        pad = torch.arange(n)[None, :] >= lengths[:, None]
        mask = pad[:, None, :].expand(-1, n, -1)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        eos_feat = x[torch.arange(len(seqs)), lengths - 1]
        return self.proj(self.norm(eos_feat))


def template_prefix(encoder, tokenizer=None, template=TEMPLATE):
    """Token embeddings of the words preceding ``[class]`` in the template."""
    tokenizer = tokenizer or Tokenizer()
    head = template.split("[class]")[0]
    return encoder.embed_tokens(tokenizer.encode(head))


def encode_class_texts(vocab, prompt, encoder):
    """Text embeddings ``t`` (K x C); differentiable w.r.t. ``prompt`` only."""
    return encoder(prompt, vocab.token_ids)


def fixed_prompt_embeddings(vocab, encoder, tokenizer=None):
    """``T_0``: embeddings under the fixed template prompt (constant)."""
    with torch.no_grad():
        return encode_class_texts(vocab, template_prefix(encoder, tokenizer), encoder)


def normalized(t):
    return F.normalize(t, dim=-1)


class QueryMLP(nn.Module):

    def __init__(self, in_dim, dim):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        return self.fc2(F.gelu(self.fc1(t)))


def make_queries(t, mlp):
    """Initial textual object queries ``q_t^0`` (K x D)."""
    if t.ndim != 2 or t.shape[1] != mlp.fc1.in_features:
        raise ConfigError(f"text embeddings must be (K, {mlp.fc1.in_features}), got {tuple(t.shape)}")
    return mlp(t)


def make_cluster_centers(t, linear):
    """Textual cluster centers ``c_t`` (K x D) by a single linear map."""
    if t.ndim != 2 or t.shape[1] != linear.in_features:
        raise ConfigError(f"text embeddings must be (K, {linear.in_features}), got {tuple(t.shape)}")
    return linear(t)


class TextQueryGenerator(nn.Module):
    """Owns the frozen encoder, the learnable prompt and the query/center heads."""

    def __init__(self, vocab, embed_dim=64, query_dim=32, prompt_length=8, token_dim=64,
                 learnable_prompt=True, encoder_seed=0, prompt_seed=1, tokenizer=None):
        super().__init__()
        self.vocab = vocab
        self.tokenizer = tokenizer or Tokenizer()
        self.encoder = FrozenTextEncoder(token_dim=token_dim, embed_dim=embed_dim, seed=encoder_seed)
        self.learnable_prompt = learnable_prompt
        if learnable_prompt:
            g = torch.Generator().manual_seed(prompt_seed)
            self.prompt = nn.Parameter(0.02 * torch.randn(prompt_length, token_dim, generator=g))
        else:
            self.prompt = None
        self.query_mlp = QueryMLP(embed_dim, query_dim)
        self.center_proj = nn.Linear(embed_dim, query_dim)
        self._fixed = None

    @property
    def num_classes(self):
        return len(self.vocab)

    def fixed_embeddings(self):
        ref = self.encoder.pos_embedding
        if self._fixed is None or self._fixed.dtype != ref.dtype:
            self._fixed = fixed_prompt_embeddings(self.vocab, self.encoder, self.tokenizer)
        return self._fixed

    def text_embeddings(self):
        if self.prompt is None:
            return self.fixed_embeddings()
        return encode_class_texts(self.vocab, self.prompt, self.encoder)

    def forward(self):
        """Returns ``(t, q0, c_t)``."""
        t = self.text_embeddings()
        return t, make_queries(t, self.query_mlp), make_cluster_centers(t, self.center_proj)
