"""Whole-model assembly: config, forward pass, and checkpoint IO."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderOutput, QueryDecoder, select_queries
from .encoders import ExemplarBoxes, ImageInput, PatchPyramidEncoder, \
    TextEncoder, TextPrompt, Vocabulary, make_caption, preprocess
from .errors import ConfigError, PromptError, ShapeError
from .fusion import ANONYMOUS_CLASS, FeatureEnhancer, TokenSet, assemble_token_set
from .nn import merge_params
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PCCK\x01\n"

DEFAULT_VOCAB = [
    ".", "circle", "square", "triangle", "cross", "blob", "dot", "ring",
    "red", "green", "blue", "yellow", "magenta", "orange", "purple", "teal",
    "cyan", "pink", "lime", "brown", "white", "gray", "olive", "navy",
    "left", "right", "top", "bottom", "small", "large", "car", "donut",
    "stud", "lego", "strawberry", "cookie", "bird", "apple",
]


@dataclass
class ModelConfig:
    """Sizes and budgets for one model instance.

    Toy-scale defaults; ``paper_scale_config`` returns the full-scale
    sizing (width 256, six blocks each, 900 queries, side 800).
    """
    d_model: int = 64
    n_heads: int = 4
    strides: tuple = (4, 8, 16)
    level_dims: tuple | None = None
    enhancer_blocks: int = 3
    decoder_blocks: int = 3
    text_blocks: int = 2
    ffn_ratio: int = 4
    k: int = 100
    image_side: int = 128
    exemplar_pool: int = 2
    max_text_len: int = 256
    vocab_words: tuple = tuple(DEFAULT_VOCAB)
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("query budget k must be positive")
        if self.enhancer_blocks < 1 or self.decoder_blocks < 1:
            raise ConfigError("block counts must be at least 1")
        self.strides = tuple(self.strides)
        if self.level_dims is not None:
            self.level_dims = tuple(self.level_dims)
        self.vocab_words = tuple(self.vocab_words)

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def paper_scale_config() -> ModelConfig:
    """Full-scale sizing: three strides with pre-projection widths
    192/384/768 projected to 256, six fusion and decoder blocks, 900
    queries, shortest image side 800."""
    return ModelConfig(d_model=256, n_heads=8, strides=(8, 16, 32),
                       level_dims=(192, 384, 768), enhancer_blocks=6,
                       decoder_blocks=6, text_blocks=2, k=900, image_side=800)


class CountModel:
    """Encoders, fusion stack, and decoder behind one forward call.

    The forward pass is a pure function of (inputs, parameters); with a
    fixed seed, construction and every forward are deterministic.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.vocab = Vocabulary(list(config.vocab_words))
        self.image_encoder = PatchPyramidEncoder(
            rng, config.d_model, config.strides, config.level_dims)
        self.text_encoder = TextEncoder(
            rng, len(self.vocab), config.d_model, config.n_heads,
            config.text_blocks, config.max_text_len)
        self.enhancer = FeatureEnhancer(
            rng, config.d_model, config.n_heads, config.enhancer_blocks,
            config.ffn_ratio)
        self.decoder = QueryDecoder(
            rng, config.d_model, config.n_heads, config.decoder_blocks,
            config.ffn_ratio)

    def params(self) -> dict:
        return merge_params(self.image_encoder.params(),
                            self.text_encoder.params(),
                            self.enhancer.params(),
                            self.decoder.params())

    def forward(self, image: ImageInput, prompt: TextPrompt | None = None,
                boxes: ExemplarBoxes | None = None,
                exemplar_classes=None,
                probe: dict | None = None,
                trace: dict | None = None) -> tuple[DecoderOutput, TokenSet]:
        """Score k queries against the prompt tokens for one image.

        ``exemplar_classes[i]`` names the caption class-span of box i
        (default: class 0, or anonymous when there is no text).  When a
        ``trace`` dict is supplied it receives the fused features and
        the multi-scale grid, which the trainer uses for the selection
        alignment term.
        """
        p = 0 if boxes is None else len(boxes)
        q = 0 if prompt is None else len(prompt)
        if p + q == 0:
            raise PromptError("empty prompt")
        feats = self.image_encoder.encode_image(image)
        img_tokens = self.image_encoder.tokens(feats)
        text_emb = self.text_encoder.encode_text(prompt) if q else \
            Tensor(np.zeros((0, self.config.d_model)))
        if p:
            ex_emb = self.image_encoder.exemplar_tokens(
                feats, boxes, self.config.exemplar_pool)
        else:
            ex_emb = Tensor(np.zeros((0, self.config.d_model)))
        if exemplar_classes is None:
            exemplar_classes = np.full(p, 0 if q else ANONYMOUS_CLASS)
        token_set = assemble_token_set(prompt if q else None, text_emb,
                                       ex_emb, exemplar_classes)
        tok_feats, img_feats = self.enhancer(img_tokens, token_set, probe)
        selection = select_queries(img_feats, tok_feats, self.config.k)
        out = self.decoder(img_feats, tok_feats, selection,
                           feats.token_centers())
        if trace is not None:
            trace.update(img_feats=img_feats, tok_feats=tok_feats, msf=feats)
        return out, token_set

    def forward_pixels(self, pixels: np.ndarray,
                       text: str | None = None,
                       boxes: ExemplarBoxes | None = None,
                       keyword: str | None = None,
                       exemplar_classes=None,
                       ) -> tuple[DecoderOutput, TokenSet, TextPrompt | None]:
        """Preprocess raw pixels, scale boxes, build the caption, and run.

        Center predictions come back in normalized coordinates that are
        valid for the original image (aspect ratio is preserved).
        """
        img = ImageInput(pixels)
        prepped = preprocess(img, self.config.image_side)
        prompt = None
        if text:
            names = [n.strip() for n in text.split(".") if n.strip()]
            prompt = make_caption(names, self.vocab, keyword,
                                  self.config.max_text_len)
        scaled = None
        if boxes is not None and len(boxes):
            sx = prepped.size[0] / img.size[0]
            sy = prepped.size[1] / img.size[1]
            scaled = boxes.scaled(sx, sy)
        out, token_set = self.forward(prepped, prompt, scaled, exemplar_classes)
        return out, token_set, prompt

    # ------------------------------------------------------------------
    # checkpoints: magic, u64 json length, json manifest, tensor blobs

    def save(self, path, epoch: int = 0, metrics: dict | None = None) -> None:
        params = self.params()
        names = sorted(params)
        manifest = {
            "config": self.config.to_json_dict(),
            "epoch": epoch,
            "metrics": metrics or {},
            "tensors": names,
        }
        blob = json.dumps(manifest).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for name in names:
                T.save_tensor_blob(params[name].data, fh)

    @classmethod
    def load(cls, path) -> tuple["CountModel", dict]:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ConfigError(f"{path} is not a model checkpoint")
            (n,) = struct.unpack("<Q", fh.read(8))
            manifest = json.loads(fh.read(n).decode("utf-8"))
            model = cls(ModelConfig.from_json_dict(manifest["config"]))
            params = model.params()
            for name in manifest["tensors"]:
                if name not in params:
                    raise ConfigError(f"checkpoint tensor {name} unknown to model")
                data = T.load_tensor_blob(fh)
                if data.shape != params[name].data.shape:
                    raise ShapeError(
                        f"checkpoint tensor {name} has shape {data.shape}, "
                        f"expected {params[name].data.shape}")
                params[name].data[...] = data
        return model, manifest
