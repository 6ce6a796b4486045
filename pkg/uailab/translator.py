"""Content/style translation between the training and test domains.

Each domain has an encoder that splits a frame into a content code and an
8-number style code, and a decoder that rebuilds a frame from the pair.
Content codes are shared across domains, so swapping in a training-domain
style turns a test frame into a training-looking one. Both directions are
trained with L1 reconstruction of frames and codes plus a least-squares
adversarial loss.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint, logger
from .nn import (
    DimensionError,
    NonFiniteError,
    ParamStore,
    Tape,
    Tensor,
    absolute,
    add,
    columns,
    concat,
    init_mlp,
    mean,
    mlp,
    scale,
    square,
    sub,
)
from .optim import AdamState, adam_step
from .policy import DemoRecord
from .utils import atomic_write
from .world import TRAINING_STYLES, StyleId, WorldState, render

STYLE_DIM = 8
CONTENT_DIM = 32
DOMAINS = ("train", "test")


@dataclass
class TranslatorConfig:
    obs_dim: int = 256
    content_dim: int = CONTENT_DIM
    hidden: int = 64
    disc_hidden: int = 64
    iterations: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.5
    w_image: float = 10.0
    w_content: float = 1.0
    w_style: float = 1.0
    w_adversarial: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TranslatorConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class DomainModel:
    """Encoder and decoder of one domain; parameters live in a shared store."""

    def __init__(self, tag: str, params: ParamStore, config: TranslatorConfig) -> None:
        if tag not in DOMAINS:
            raise ValueError(f'Unknown domain "{tag}"')
        self.tag = tag
        self.params = params
        self.config = config
        self.enc_prefix = f"enc.{tag}"
        self.dec_prefix = f"dec.{tag}"
        self.enc_spec = ((config.hidden, "relu"), (config.content_dim + STYLE_DIM, "linear"))
        self.dec_spec = ((config.hidden, "relu"), (config.obs_dim, "sigmoid"))

    def init(self, rng: np.random.Generator, init: str = "auto") -> None:
        c = self.config
        init_mlp(self.params, self.enc_prefix, c.obs_dim, self.enc_spec, rng, init)
        init_mlp(self.params, self.dec_prefix, c.content_dim + STYLE_DIM, self.dec_spec, rng, init)

    def encode_tensors(self, frames: Tensor) -> Tuple[Tensor, Tensor]:
        if frames.data.ndim != 2 or frames.shape[1] != self.config.obs_dim:
            raise DimensionError(
                f"{self.enc_prefix}: frame shape {list(frames.shape)} does not match "
                f"observation size {self.config.obs_dim}"
            )
        out = mlp(self.params, self.enc_prefix, self.enc_spec, frames)
        c = self.config.content_dim
        return columns(out, 0, c), columns(out, c, c + STYLE_DIM)

    def decode_tensors(self, content: Tensor, style: Tensor) -> Tensor:
        if content.shape[1] != self.config.content_dim or style.shape[1] != STYLE_DIM:
            raise DimensionError(
                f"{self.dec_prefix}: expects codes of width {self.config.content_dim}+{STYLE_DIM}, "
                f"got {content.shape[1]}+{style.shape[1]}"
            )
        return mlp(self.params, self.dec_prefix, self.dec_spec, concat([content, style]))


class Translator:
    """Both domain models plus one discriminator per domain."""

    def __init__(
        self,
        config: TranslatorConfig,
        params: Optional[ParamStore] = None,
        seed: int = 0,
        init: str = "auto",
    ) -> None:
        self.config = config
        self.disc_spec = ((config.disc_hidden, "relu"), (1, "linear"))
        fresh = params is None
        self.params = ParamStore() if fresh else params
        self.train = DomainModel("train", self.params, config)
        self.test = DomainModel("test", self.params, config)
        if fresh:
            rng = np.random.default_rng(seed)
            for tag in DOMAINS:
                self.domain(tag).init(rng, init)
            for tag in DOMAINS:
                init_mlp(self.params, f"disc.{tag}", config.obs_dim, self.disc_spec, rng, init)

    def domain(self, tag: str) -> DomainModel:
        return self.train if tag == "train" else self.test

    def discriminate(self, tag: str, frames: Tensor) -> Tensor:
        return mlp(self.params, f"disc.{tag}", self.disc_spec, frames)

    def generator_names(self) -> List[str]:
        return self.params.names("enc.") + self.params.names("dec.")

    def discriminator_names(self) -> List[str]:
        return self.params.names("disc.")

    def save(self, path: str, meta: Optional[dict] = None, adam: Optional[Dict[str, AdamState]] = None) -> None:
        arrays = self.params.state_dict()
        info = {"kind": "translator", "config": self.config.to_dict()}
        for role, state in (adam or {}).items():
            arrays.update(state.export(f"adam.{role}"))
            info[f"adam.{role}"] = state.hyper()
        info.update(meta or {})
        checkpoint.save(path, arrays, info)

    @classmethod
    def load(cls, path: str) -> Tuple["Translator", dict, Dict[str, AdamState]]:
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "translator":
            raise checkpoint.CheckpointError(f'"{path}" does not hold a translator.')
        params = ParamStore()
        for name, value in arrays.items():
            if not name.startswith("adam."):
                params.add(name, value)
        adam = {
            role: AdamState.restore(arrays, meta[f"adam.{role}"], f"adam.{role}")
            for role in ("gen", "disc")
            if f"adam.{role}" in meta
        }
        translator = cls(TranslatorConfig.from_dict(meta["config"]), params)
        expected = Translator(translator.config, init="zero").params
        for name, value in expected.items():
            if name not in params or params[name].shape != value.shape:
                raise DimensionError(f'Translator checkpoint lacks or misshapes "{name}"')
        return translator, meta, adam


def _rows(frames) -> Tuple[np.ndarray, bool]:
    a = np.asarray(frames, dtype=np.float64)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def encode(model: DomainModel, frame) -> Tuple[np.ndarray, np.ndarray]:
    """(content, style) of one frame, or of every row of a batch."""
    x, single = _rows(frame)
    content, style = model.encode_tensors(Tape().constant(x))
    if single:
        return content.data[0], style.data[0]
    return content.data, style.data


def decode(model: DomainModel, content, style) -> np.ndarray:
    c, single = _rows(content)
    s, _ = _rows(style)
    if c.shape[0] != s.shape[0]:
        raise DimensionError("decode: content and style batches differ in length")
    tape = Tape()
    out = model.decode_tensors(tape.constant(c), tape.constant(s)).data
    return out[0] if single else out


def translate_to_train(translator: Translator, frame_test, styles: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Decode the test frame's content once per training-domain style."""
    if len(styles) < 1:
        raise ValueError("translate_to_train needs at least one style code.")
    content, _ = encode(translator.test, frame_test)
    s = np.stack([np.asarray(v, dtype=np.float64) for v in styles])
    frames = decode(translator.train, np.repeat(content[None, :], len(styles), axis=0), s)
    return list(frames)


def oracle_translate(state: WorldState, style) -> np.ndarray:
    """Re-render the scene under a training style."""
    try:
        style = StyleId(style)
    except ValueError:
        raise ValueError(f'Unknown style "{style}"') from None
    if not style.is_training:
        raise ValueError(f'"{style.value}" is not a training style.')
    return render(state, style)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TranslatorCurves:
    image: List[float] = field(default_factory=list)
    content: List[float] = field(default_factory=list)
    style: List[float] = field(default_factory=list)
    adversarial: List[float] = field(default_factory=list)
    discriminator: List[float] = field(default_factory=list)

    def rows(self):
        return zip(self.image, self.content, self.style, self.adversarial, self.discriminator)


@dataclass
class TranslatorResult:
    translator: Translator
    curves: TranslatorCurves
    adam: Dict[str, AdamState]


def _l1(a: Tensor, b: Tensor) -> Tensor:
    return mean(absolute(sub(a, b)))


def _lsgan(score: Tensor, target: float) -> Tensor:
    return mean(square(sub(score, score.tape.constant(np.full(score.shape, target)))))


def train_translator(
    train_frames,
    test_frames,
    config: TranslatorConfig,
    translator: Optional[Translator] = None,
    adam: Optional[Dict[str, AdamState]] = None,
) -> TranslatorResult:
    """Alternate one generator and one discriminator update per iteration.

    The two frame sets need not be paired. Generators see image
    reconstruction in both domains, content and style reconstruction after
    cross translation with standard-normal styles, and the least-squares
    adversarial term in both directions.
    """
    xa = np.asarray(train_frames, dtype=np.float64)
    xb = np.asarray(test_frames, dtype=np.float64)
    if xa.ndim != 2 or xb.ndim != 2 or not len(xa) or not len(xb):
        raise ValueError("train_translator needs two non-empty frame batches.")
    if translator is None:
        translator = Translator(config, seed=config.seed)
    adam = adam or {}
    adam_g = adam.get("gen") or AdamState(lr=config.lr, beta1=config.beta1)
    adam_d = adam.get("disc") or AdamState(lr=config.lr, beta1=config.beta1)

    params = translator.params
    gen_names = translator.generator_names()
    disc_names = translator.discriminator_names()
    A, B = translator.train, translator.test
    rng = np.random.default_rng([config.seed, adam_g.step])
    curves = TranslatorCurves()
    n = min(config.batch_size, len(xa), len(xb))
    start = time.perf_counter()

    for it in range(config.iterations):
        ba = xa[rng.choice(len(xa), n, replace=len(xa) < n)]
        bb = xb[rng.choice(len(xb), n, replace=len(xb) < n)]
        noise_a = rng.standard_normal((n, STYLE_DIM))
        noise_b = rng.standard_normal((n, STYLE_DIM))

        try:
            tape = Tape()
            real_a, real_b = tape.constant(ba), tape.constant(bb)
            ca, sa = A.encode_tensors(real_a)
            cb, sb = B.encode_tensors(real_b)
            image = add(_l1(A.decode_tensors(ca, sa), real_a), _l1(B.decode_tensors(cb, sb), real_b))

            style_a, style_b = tape.constant(noise_a), tape.constant(noise_b)
            b2a = A.decode_tensors(cb, style_a)
            a2b = B.decode_tensors(ca, style_b)
            cb_rec, sa_rec = A.encode_tensors(b2a)
            ca_rec, sb_rec = B.encode_tensors(a2b)
            content = add(_l1(cb_rec, cb), _l1(ca_rec, ca))
            style = add(_l1(sa_rec, style_a), _l1(sb_rec, style_b))
            adversarial = add(
                _lsgan(translator.discriminate("train", b2a), 1.0),
                _lsgan(translator.discriminate("test", a2b), 1.0),
            )
            total = add(
                add(scale(image, config.w_image), scale(content, config.w_content)),
                add(scale(style, config.w_style), scale(adversarial, config.w_adversarial)),
            )
            params.zero_grad()
            tape.backward(total)
        except NonFiniteError as e:
            raise NonFiniteError("Non-finite generator loss", iteration=it) from e
        adam_step(params, adam_g, gen_names)

        try:
            tape = Tape()
            disc = add(
                add(
                    _lsgan(translator.discriminate("train", tape.constant(ba)), 1.0),
                    _lsgan(translator.discriminate("train", tape.constant(b2a.data)), 0.0),
                ),
                add(
                    _lsgan(translator.discriminate("test", tape.constant(bb)), 1.0),
                    _lsgan(translator.discriminate("test", tape.constant(a2b.data)), 0.0),
                ),
            )
            params.zero_grad(disc_names)
            tape.backward(disc)
        except NonFiniteError as e:
            raise NonFiniteError("Non-finite discriminator loss", iteration=it) from e
        adam_step(params, adam_d, disc_names)

        curves.image.append(image.item())
        curves.content.append(content.item())
        curves.style.append(style.item())
        curves.adversarial.append(adversarial.item())
        curves.discriminator.append(disc.item())
        if it % 200 == 0 or it == config.iterations - 1:
            logger.info(
                "Translator iteration %d/%d: image %.4f, content %.4f, style %.4f, adv %.4f, disc %.4f",
                it + 1,
                config.iterations,
                curves.image[-1],
                curves.content[-1],
                curves.style[-1],
                curves.adversarial[-1],
                curves.discriminator[-1],
            )

    logger.info("Translator trained in %.1f s", time.perf_counter() - start)
    return TranslatorResult(translator, curves, {"gen": adam_g, "disc": adam_d})


# --------------------------------------------------------------------------
# Style pool
# --------------------------------------------------------------------------


@dataclass
class StylePool:
    """Reference frames per training condition, identified by record id."""

    ids: Dict[str, List[int]]
    frames: Dict[str, np.ndarray] = field(default_factory=dict)
    codes: Optional[Dict[str, np.ndarray]] = None

    @classmethod
    def build(
        cls,
        records: Sequence[DemoRecord],
        rng: np.random.Generator,
        per_style: int = 10,
        styles: Sequence[StyleId] = TRAINING_STYLES,
    ) -> "StylePool":
        ids, frames = {}, {}
        for style in styles:
            style = StyleId(style)
            matching = [r for r in records if r.style == style.value]
            if len(matching) < per_style:
                raise ValueError(
                    f'Style pool needs {per_style} "{style.value}" frames, the dataset has {len(matching)}.'
                )
            pick = sorted(rng.choice(len(matching), per_style, replace=False))
            ids[style.value] = [int(matching[i].id) for i in pick]
            frames[style.value] = np.stack([matching[i].frame for i in pick])
        return cls(ids, frames)

    @property
    def styles(self) -> List[str]:
        return list(self.ids)

    def __len__(self) -> int:
        return sum(len(v) for v in self.ids.values())

    def save(self, path: str) -> None:
        with atomic_write(path) as f:
            json.dump({"styles": self.ids}, f, indent=2)

    @classmethod
    def load(cls, path: str, records: Sequence[DemoRecord]) -> "StylePool":
        with open(path, "r", encoding="utf-8") as f:
            ids = {k: [int(i) for i in v] for k, v in json.load(f)["styles"].items()}
        by_id = {int(r.id): r for r in records}
        frames = {}
        for style, wanted in ids.items():
            StyleId(style)
            missing = [i for i in wanted if i not in by_id]
            if missing:
                raise ValueError(f'Style pool references unknown records {missing[:5]} for "{style}"')
            frames[style] = np.stack([by_id[i].frame for i in wanted])
        return cls(ids, frames)

    def encode_with(self, translator: Translator) -> "StylePool":
        """Cache the training-domain style code of every pool frame."""
        self.codes = {s: encode(translator.train, f)[1] for s, f in self.frames.items()}
        return self


def fixed_style_code(translator: Translator, pool: StylePool, style: str) -> np.ndarray:
    """Mean encoded style of one condition's pool frames."""
    frames = pool.frames.get(StyleId(style).value)
    if frames is None or not len(frames):
        raise ValueError(f'The style pool has no "{style}" frames.')
    return encode(translator.train, frames)[1].mean(axis=0)


# --------------------------------------------------------------------------
# Measurements
# --------------------------------------------------------------------------


def reconstruction_error(model: DomainModel, frames) -> float:
    """Mean absolute error per value of decode(encode(x))."""
    c, s = encode(model, np.atleast_2d(frames))
    return float(np.mean(np.abs(decode(model, c, s) - np.atleast_2d(frames))))


def style_reconstruction_error(translator: Translator, frames_test, rng: np.random.Generator, n: int = 100) -> float:
    """Mean absolute error per style entry after decoding test content with
    random training styles and encoding again."""
    content, _ = encode(translator.test, np.atleast_2d(frames_test))
    content = content[rng.integers(len(content), size=n)]
    styles = rng.standard_normal((n, STYLE_DIM))
    _, recovered = encode(translator.train, decode(translator.train, content, styles))
    return float(np.mean(np.abs(recovered - styles)))


def discriminator_accuracy(translator: Translator, real_train, frames_test, rng: np.random.Generator) -> float:
    """Fraction of real training frames and translated test frames the
    training-domain discriminator classifies correctly (score > 0.5 means real)."""
    real = np.atleast_2d(real_train)
    content, _ = encode(translator.test, np.atleast_2d(frames_test))
    fake = decode(translator.train, content, rng.standard_normal((len(content), STYLE_DIM)))
    tape = Tape()
    s_real = translator.discriminate("train", tape.constant(real)).data.ravel()
    s_fake = translator.discriminate("train", tape.constant(fake)).data.ravel()
    correct = np.count_nonzero(s_real > 0.5) + np.count_nonzero(s_fake <= 0.5)
    return correct / (len(s_real) + len(s_fake))
