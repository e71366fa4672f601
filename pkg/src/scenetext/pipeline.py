"""End-to-end jobs behind the CLI: render, generate, evaluate, attn-dump.

Each job runs as a sequence of named stages; any failure is re-raised
with its stage name prefixed so a long pipeline points at the step that
broke. Every job writes a manifest.json carrying the fully resolved
parameters needed to re-run it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio, metrics as metrics_mod, raster
from .attention import AttentionDirective, match_wordlist
from .config import AppConfig, BACKENDS
from .edges import canny
from .errors import BackendError, ConfigError, EvalError, SceneTextError, WireTimeout
from .guidance import GuidanceScales
from .metrics import EvalRecord, augment_prompt
from .raster import BBox, GlyphAtlas, bbox_perimeter, embedded_atlas, load_atlas
from .sampler import ToyGlyphDenoiser, PointMassDenoiser, make_schedule, sample
from .wire import RemoteDenoiser, WireClient

TOY_BACKGROUND = 0.0


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except SceneTextError as e:
        e.args = (f"{name}: {e}",) if e.args else (name,)
        raise
    finally:
        timings[name] = round(time.perf_counter() - start, 4)


def _resolve_atlas(cfg: AppConfig, font_seed: int) -> GlyphAtlas:
    if cfg.raster.font == "embedded":
        return embedded_atlas()
    if cfg.raster.font == "atlas":
        if not cfg.raster.atlas_image:
            raise ConfigError("font 'atlas' needs raster.atlas_image")
        return load_atlas(cfg.raster.atlas_image, cfg.raster.atlas_manifest)
    if cfg.raster.font == "random":
        pool = cfg.raster.atlas_pool
        if not pool:
            raise ConfigError("font 'random' needs a nonempty raster.atlas_pool")
        image, manifest = pool[np.random.default_rng(font_seed).integers(len(pool))]
        return load_atlas(image, manifest)
    raise ConfigError(
        f"unknown font {cfg.raster.font!r}, use 'embedded', 'atlas', or 'random'"
    )


def _resolved_manifest(command: str, cfg: AppConfig, **extra) -> dict:
    doc = {"command": command, "config": dataclasses.asdict(cfg)}
    doc.update(extra)
    return doc


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


@dataclass
class RenderResult:
    bbox: BBox
    sketch_path: Path
    edge_path: Path
    mask_path: Path


def run_render(
    text: str,
    cfg: AppConfig,
    out_dir: str | Path,
    bbox: BBox | None = None,
) -> RenderResult:
    """Render the sketch and derive its edge map and region mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    canvas = cfg.raster.canvas

    bbox_seed, _, font_seed = _derive_seeds(cfg.seed)
    with _stage("load_font", timings):
        atlas = _resolve_atlas(cfg, font_seed)
    with _stage("place_bbox", timings):
        box = raster.place_bbox(len(text), canvas, bbox_seed, bbox)
    with _stage("render_sketch", timings):
        sketch = raster.render_sketch(text, atlas, box, canvas)
    with _stage("detect_edges", timings):
        edge = canny(sketch, cfg.edges.low, cfg.edges.high, cfg.edges.sigma)
    with _stage("region_mask", timings):
        mask = raster.make_region_mask(box, canvas)
    with _stage("write_outputs", timings):
        paths = RenderResult(
            bbox=box,
            sketch_path=out_dir / "sketch.png",
            edge_path=out_dir / "edge.png",
            mask_path=out_dir / "mask.png",
        )
        imgio.save_gray(paths.sketch_path, sketch)
        imgio.save_binary(paths.edge_path, edge)
        imgio.save_binary(paths.mask_path, mask)
        _write_json(
            out_dir / "manifest.json",
            _resolved_manifest("render", cfg, text=text, bbox=list(box.as_tuple()),
                               timings=timings),
        )
    return paths


def _derive_seeds(seed: int) -> tuple[int, int, int]:
    """Independent placement, noise, and font seeds from the one user seed."""
    state = np.random.SeedSequence(seed).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


class _RetryingDenoiser:
    """Retries timed-out remote predictions; fatal errors pass through."""

    def __init__(self, inner: RemoteDenoiser, retries: int):
        self.inner = inner
        self.max_retries = retries
        self.retries_used = 0

    def predict(self, z, t, cond, session=None, directive=None):
        attempt = 0
        while True:
            try:
                return self.inner.predict(z, t, cond, session=session, directive=directive)
            except WireTimeout as e:
                if attempt >= self.max_retries:
                    raise BackendError(
                        f"remote prediction timed out after {attempt + 1} attempts "
                        f"({attempt} retries): {e}"
                    ) from e
                attempt += 1
                self.retries_used += 1


@dataclass
class GenerateResult:
    image_path: Path
    metadata: dict
    out_dir: Path
    tokens: list[str]
    token_indices: frozenset[int]
    bbox: BBox
    attention_records: list


def run_generate(
    text: str,
    prompt: str,
    cfg: AppConfig,
    out_dir: str | Path,
    bbox: BBox | None = None,
    dump_latents: bool = False,
    record_attention: bool = False,
) -> GenerateResult:
    """Full generation: sketch, edges, guided reverse sampling, outputs."""
    if not text:
        raise ConfigError("target text must not be empty")
    if cfg.backend not in BACKENDS:
        raise ConfigError(f"unknown backend {cfg.backend!r}, pick from {BACKENDS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    canvas = cfg.raster.canvas
    bbox_seed, noise_seed, font_seed = _derive_seeds(cfg.seed)

    with _stage("load_font", timings):
        atlas = _resolve_atlas(cfg, font_seed)
    with _stage("place_bbox", timings):
        box = raster.place_bbox(len(text), canvas, bbox_seed, bbox)
    with _stage("render_sketch", timings):
        sketch = raster.render_sketch(text, atlas, box, canvas)
    with _stage("detect_edges", timings):
        edge = canny(sketch, cfg.edges.low, cfg.edges.high, cfg.edges.sigma)
    with _stage("build_conditions", timings):
        mask = raster.make_region_mask(box, canvas)
        pip_edge = raster.make_pip_edge(edge, box)
        full_prompt = augment_prompt(prompt, text, cfg.constraint.wordlist)

    retries_used = 0
    attention_records = []
    rng = np.random.default_rng(noise_seed)
    schedule = make_schedule(cfg.sampler.t_train, cfg.sampler.steps,
                             cfg.sampler.beta_start, cfg.sampler.beta_end)

    if cfg.backend == "remote":
        with _stage("connect", timings):
            client = WireClient.connect(cfg.remote.host, cfg.remote.port, cfg.remote.timeout)
        try:
            with _stage("init_session", timings):
                session = client.init_session(full_prompt, cfg.constraint.wordlist,
                                              edge, pip_edge, canvas)
            tokens = full_prompt.split()
            token_indices = session.token_indices
            directive = _build_directive(cfg, mask, token_indices) if cfg.constraint.enabled else None
            with _stage("sample", timings):
                denoiser = _RetryingDenoiser(RemoteDenoiser(client, session), cfg.remote.retries)
                z0 = sample(
                    rng.standard_normal(session.latent_shape),
                    denoiser,
                    schedule,
                    cfg.guidance,
                    directive=directive,
                    session=session,
                    dump_dir=out_dir / "latents" if dump_latents else None,
                )
                retries_used = denoiser.retries_used
            with _stage("decode_latent", timings):
                decoded = client.decode_latent(session, z0)
                image = _as_image(decoded)
        finally:
            client.close()
    else:
        with _stage("match_tokens", timings):
            tokens, token_indices = match_wordlist(full_prompt, cfg.constraint.wordlist)
        with _stage("sample", timings):
            # The toy backend realizes "constraint off" as an empty region
            # (nothing may be painted); real backends instead drop the
            # directive and let attention roam free.
            directive = _build_directive(
                cfg,
                mask if cfg.constraint.enabled else np.zeros_like(mask),
                token_indices,
            )
            if cfg.backend == "toy_glyph":
                denoiser = ToyGlyphDenoiser(
                    sketch,
                    schedule,
                    token_count=max(len(tokens), 1),
                    focus_token=min(token_indices) if token_indices else None,
                    perimeter_band=bbox_perimeter(box, canvas),
                    background=TOY_BACKGROUND,
                    record_attention=record_attention,
                )
                latent_shape = (3, canvas[1], canvas[0])
            else:  # point_mass
                field = np.where(sketch == 0, -1.0, 1.0)
                denoiser = PointMassDenoiser(
                    np.broadcast_to(field, (3,) + field.shape).copy(), schedule
                )
                latent_shape = (3, canvas[1], canvas[0])
            z0 = sample(
                rng.standard_normal(latent_shape),
                denoiser,
                schedule,
                cfg.guidance,
                directive=directive,
                dump_dir=out_dir / "latents" if dump_latents else None,
            )
        with _stage("decode_latent", timings):
            image = imgio.latent_to_image(z0)
        attention_records = getattr(denoiser, "attention_records", [])

    with _stage("write_outputs", timings):
        image_path = out_dir / "image.png"
        imgio.save_rgb(image_path, image)
        imgio.save_gray(out_dir / "sketch.png", sketch)
        imgio.save_binary(out_dir / "edge.png", edge)
        imgio.save_binary(out_dir / "mask.png", mask)
        metadata = {
            "text": text,
            "prompt": prompt,
            "augmented_prompt": full_prompt,
            "backend": cfg.backend,
            "seed": cfg.seed,
            "canvas": [canvas[0], canvas[1]],
            "bbox": list(box.as_tuple()),
            "scales": dataclasses.asdict(cfg.guidance),
            "constraint": {
                "enabled": cfg.constraint.enabled,
                "lambda": cfg.constraint.strength,
                "wordlist": list(cfg.constraint.wordlist),
                "token_indices": sorted(token_indices),
            },
            "sampler": {
                "steps": cfg.sampler.steps,
                "t_train": cfg.sampler.t_train,
            },
            "edges": dataclasses.asdict(cfg.edges),
            "tokens": tokens,
            "retries": retries_used,
            "timings": timings,
            "outputs": {
                "image": image_path.name,
                "sketch": "sketch.png",
                "edge": "edge.png",
                "mask": "mask.png",
            },
        }
        _write_json(out_dir / "metadata.json", metadata)
        _write_json(
            out_dir / "manifest.json",
            _resolved_manifest("generate", cfg, text=text, prompt=prompt,
                               bbox=list(box.as_tuple())),
        )

    return GenerateResult(
        image_path=image_path,
        metadata=metadata,
        out_dir=out_dir,
        tokens=tokens,
        token_indices=frozenset(token_indices),
        bbox=box,
        attention_records=list(attention_records),
    )


def _build_directive(cfg: AppConfig, mask: np.ndarray, token_indices) -> AttentionDirective:
    return AttentionDirective(
        mask=mask,
        token_indices=frozenset(token_indices),
        strength=cfg.constraint.strength,
    )


def _as_image(decoded: np.ndarray) -> np.ndarray:
    """Accept either a uint8 image or a latent-valued array from decode."""
    if decoded.dtype == np.uint8:
        if decoded.ndim != 3 or decoded.shape[0] != 3:
            raise BackendError(f"decoded image has shape {decoded.shape}, expected (3, h, w)")
        return decoded
    return imgio.latent_to_image(np.asarray(decoded, dtype=np.float64))


def run_attn_dump(
    text: str,
    prompt: str,
    cfg: AppConfig,
    out_dir: str | Path,
    bbox: BBox | None = None,
) -> dict:
    """Generate with the toy backend and dump per-token attention heatmaps."""
    if cfg.backend != "toy_glyph":
        raise BackendError(
            f"backend {cfg.backend!r} does not expose attention records; "
            "attention dumps need the toy_glyph backend"
        )
    out_dir = Path(out_dir)
    result = run_generate(text, prompt, cfg, out_dir, bbox=bbox, record_attention=True)
    records = result.attention_records
    if not records:
        raise BackendError(
            "no attention was recorded; the prompt has no wordlist word to constrain"
        )
    canvas = cfg.raster.canvas
    from .attention import average_heatmap  # local import keeps module load light

    entries = []
    heatmaps = []
    for token in sorted(result.token_indices):
        heat = average_heatmap(records, token, canvas)
        word = result.tokens[token] if token < len(result.tokens) else f"token{token}"
        fname = f"heat_{token:02d}_{_safe(word)}.png"
        imgio.save_gray(out_dir / fname, heat)
        entries.append({"token": token, "word": word, "file": fname})
        heatmaps.append((word, heat))

    index = {"steps": len(records), "maps": entries}
    _write_json(out_dir / "attention.json", index)

    from . import report

    report.save_heatmap_grid(heatmaps, out_dir / "attention_overview.png")
    return index


def _safe(word: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in word) or "token"


def _read_jsonl(path: Path, what: str) -> list[dict]:
    try:
        text = path.read_text()
    except OSError as e:
        raise EvalError(f"cannot read {what} {path}: {e}") from e
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise EvalError(f"{what} {path}:{lineno} is not valid JSON: {e}") from e
        if not isinstance(row, dict):
            raise EvalError(f"{what} {path}:{lineno} must be a JSON object")
        rows.append(row)
    if not rows:
        raise EvalError(f"{what} {path} is empty")
    return rows


def run_evaluate(
    manifest_path: str | Path,
    out_dir: str | Path,
    recognized_path: str | Path | None = None,
    client: WireClient | None = None,
    figure: bool = True,
) -> dict:
    """Score recognized text against ground truth, grouped by language tag.

    The manifest is JSONL with {"image", "ground_truth", optional "lang"}.
    Recognized strings come either from a JSONL file with {"image",
    "recognized"} or from a remote server that offers the ocr op. Metrics
    are reported as percentages per language plus an "all" rollup when
    several languages are present.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _read_jsonl(Path(manifest_path), "manifest")
    for row in rows:
        if "image" not in row or "ground_truth" not in row:
            raise EvalError(f"manifest row {row!r} lacks image/ground_truth")

    recognized: dict[str, str] = {}
    if recognized_path is not None:
        for row in _read_jsonl(Path(recognized_path), "recognitions"):
            if "image" not in row:
                raise EvalError(f"recognition row {row!r} lacks an image key")
            key = str(row["image"])
            if key in recognized:
                raise EvalError(f"duplicate recognition for image {key!r}")
            value = row.get("recognized", row.get("text"))
            if value is None:
                raise EvalError(f"recognition row for {key!r} lacks recognized text")
            recognized[key] = str(value)
    elif client is not None:
        caps = client.capabilities()
        if "ocr" not in caps.get("supports", []):
            raise EvalError("remote server does not offer the ocr op")
        for row in rows:
            image = imgio.load_gray(row["image"])
            texts = client.ocr(image)
            recognized[str(row["image"])] = _best_match(texts, str(row["ground_truth"]))
    else:
        raise EvalError("need either a recognitions file or a remote OCR server")

    missing = [str(r["image"]) for r in rows if str(r["image"]) not in recognized]
    if missing:
        raise EvalError(f"no recognized text for {len(missing)} image(s): {missing[:5]}")

    by_lang: dict[str, list[EvalRecord]] = {}
    scored = []
    for row in rows:
        rec = EvalRecord.from_pair(str(row["ground_truth"]), recognized[str(row["image"])])
        lang = str(row.get("lang", "all"))
        by_lang.setdefault(lang, []).append(rec)
        scored.append((str(row["image"]), lang, rec))
    if len(by_lang) > 1:
        by_lang["all"] = [rec for _, _, rec in scored]

    result = {
        lang: {
            "accuracy": round(metrics_mod.accuracy(recs) * 100.0, 2),
            "edit_accuracy": round(metrics_mod.mean_norm_edit(recs) * 100.0, 2),
            "n": len(recs),
        }
        for lang, recs in by_lang.items()
    }

    with open(out_dir / "records.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "lang", "ground_truth", "recognized", "norm_edit", "exact"])
        for image, lang, rec in scored:
            writer.writerow(
                [image, lang, rec.ground_truth, rec.recognized,
                 f"{rec.norm_edit:.6f}", int(rec.exact)]
            )
    _write_json(out_dir / "metrics.json", result)
    if figure:
        from . import report

        report.save_metrics_chart(result, out_dir / "metrics.png")
    return result


def _best_match(texts: list[str], ground_truth: str) -> str:
    """Pick the OCR detection closest to the target; empty when none."""
    if not texts:
        return ""
    return max(texts, key=lambda t: metrics_mod.norm_edit(ground_truth, t))
