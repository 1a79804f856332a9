"""Audio ingestion and the deterministic synthetic corpus generator.

WAV support is a small RIFF reader/writer covering 16/24-bit integer and
32-bit float PCM, mono, 16 kHz; anything else is rejected rather than
silently converted. Synthetic utterances concatenate per-class sinusoid
recipes with cosine crossfades so a tiny model can learn to separate the
classes quickly.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import phonemes
from .errors import AudioError
from .window import SAMPLE_RATE

_PCM_INT = 1
_PCM_FLOAT = 3


@dataclass
class AudioClip:
    samples: np.ndarray      # float64 in [-1, 1]
    sample_rate: int
    source_id: str = ""

    @property
    def duration(self):
        return self.samples.shape[0] / self.sample_rate


def load_wav(path):
    """Decode a mono 16 kHz PCM WAV file to floats."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise AudioError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise AudioError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt

    if channels != 1:
        raise AudioError(f"{path}: expected mono audio, got {channels} channels")
    if sample_rate != SAMPLE_RATE:
        raise AudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {sample_rate} Hz")

    if audio_format == _PCM_INT and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == _PCM_INT and bits == 24:
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        ints = (b[:, 0].astype(np.int32) | (b[:, 1].astype(np.int32) << 8)
                | (b[:, 2].astype(np.int32) << 16))
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float64) / 8388608.0
    elif audio_format == _PCM_FLOAT and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported format (code {audio_format}, {bits}-bit)")

    if not np.all(np.isfinite(samples)):
        raise AudioError(f"{path}: non-finite samples")
    return AudioClip(samples=samples, sample_rate=sample_rate, source_id=str(path))


def write_wav(path, samples, sample_rate=SAMPLE_RATE, fmt="int16"):
    """Write mono PCM; fmt is 'int16' or 'float32'."""
    samples = np.asarray(samples, dtype=np.float64)
    if fmt == "int16":
        ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        audio_format, bits = _PCM_INT, 16
    elif fmt == "float32":
        payload = samples.astype("<f4").tobytes()
        audio_format, bits = _PCM_FLOAT, 32
    else:
        raise AudioError(f"unsupported write format {fmt!r}")

    block_align = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, audio_format, 1, sample_rate,
        sample_rate * block_align, block_align, bits,
        b"data", len(payload))
    Path(path).write_bytes(header + payload)


# -- synthetic utterances ------------------------------------------------------

PARTIAL_GRID_HZ = np.arange(300, 8100, 300)  # 26 slots, 300 Hz apart
_COMBO_STRIDE = 97  # coprime with C(26,3)=2600: distinct classes, distinct recipes


def class_recipe(class_id):
    """Fixed 3-partial recipe for a class: frequencies on the 300 Hz grid."""
    from itertools import combinations
    combos = list(combinations(range(len(PARTIAL_GRID_HZ)), 3))
    slots = combos[(class_id * _COMBO_STRIDE) % len(combos)]
    return tuple(float(PARTIAL_GRID_HZ[s]) for s in slots)


@dataclass
class SynthSpec:
    phoneme_ids: list
    durations_ms: list
    seed: int = 0
    lead_silence_ms: float = 100.0
    trail_silence_ms: float = 100.0
    crossfade_ms: float = 10.0
    noise_level: float = 0.02

    def __post_init__(self):
        if len(self.phoneme_ids) != len(self.durations_ms):
            raise ValueError("one duration per phoneme required")
        for d in self.durations_ms:
            if not 30.0 <= d <= 300.0:
                raise ValueError(f"duration {d} ms outside [30, 300]")


def synth_utterance(spec: SynthSpec, sample_rate=SAMPLE_RATE):
    """Render a spec to audio. Returns (AudioClip, class_ids, boundaries)
    where boundaries[i] = (start_sample, end_sample) of phoneme i."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5eed]))
    fade = int(round(spec.crossfade_ms * sample_rate / 1000.0))
    lead = int(round(spec.lead_silence_ms * sample_rate / 1000.0))
    trail = int(round(spec.trail_silence_ms * sample_rate / 1000.0))

    segments = []
    for cid, dur_ms in zip(spec.phoneme_ids, spec.durations_ms):
        n = int(round(dur_ms * sample_rate / 1000.0))
        t = np.arange(n) / sample_rate
        wave = np.zeros(n)
        for amp, freq in zip((1.0, 0.6, 0.4), class_recipe(cid)):
            wave += amp * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        wave *= 0.5 / 2.0  # partial amplitudes sum to 2.0; peak around 0.5
        wave += spec.noise_level * rng.standard_normal(n)
        segments.append(wave)

    if not segments:
        samples = np.zeros(lead + trail)
        return AudioClip(samples=samples, sample_rate=sample_rate), [], []

    # overlap-add with raised-cosine crossfades between neighbours
    total = lead + sum(len(s) for s in segments) - fade * (len(segments) - 1) + trail
    samples = np.zeros(total)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / max(fade, 1))
    boundaries = []
    pos = lead
    for i, seg in enumerate(segments):
        seg = seg.copy()
        if i > 0 and fade:
            seg[:fade] *= ramp
        if i < len(segments) - 1 and fade:
            seg[-fade:] *= ramp[::-1]
        samples[pos:pos + len(seg)] += seg
        boundaries.append((pos, pos + len(seg)))
        pos += len(seg) - fade if i < len(segments) - 1 else len(seg)

    np.clip(samples, -1.0, 1.0, out=samples)
    return AudioClip(samples=samples, sample_rate=sample_rate), list(spec.phoneme_ids), boundaries


def frame_rms(samples, hop):
    """Root-mean-square per length-``hop`` frame; the ragged tail counts
    as a frame padded with zeros."""
    n_frames = int(np.ceil(len(samples) / hop))
    padded = np.zeros(n_frames * hop)
    padded[:len(samples)] = samples
    frames = padded.reshape(n_frames, hop)
    return np.sqrt((frames ** 2).mean(axis=1))


# -- manifests --------------------------------------------------------------

@dataclass
class ManifestRecord:
    path: str
    tokens: list
    lang: str = "syn"
    split: str = "train"


def save_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# path<TAB>tokens<TAB>lang<TAB>split\n")
        for r in records:
            fh.write(f"{r.path}\t{' '.join(r.tokens)}\t{r.lang}\t{r.split}\n")


def load_manifest(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise AudioError(f"{path}:{lineno}: expected 4 tab-separated fields")
            records.append(ManifestRecord(path=parts[0], tokens=parts[1].split(),
                                          lang=parts[2], split=parts[3]))
    return records


def validate_manifest(records, inv):
    """Strict-mode mapping of every record; raises on unknown symbols."""
    for r in records:
        phonemes.map_sequence(r.tokens, inv)


def make_dataset(out_dir, n_utts, n_classes, seed, inventory=None,
                 val_fraction=0.0, lang="syn",
                 phonemes_per_utt=(6.3, 1.45), duration_ms_range=(62.0, 107.0)):
    """Generate a deterministic synthetic corpus under ``out_dir``.

    Classes are drawn round-robin from a reshuffled bag for near-uniform
    coverage; per-utterance phoneme counts follow the configured normal.
    Writes WAV files, ``manifest.tsv`` and the subset ``inventory.tsv``
    (plus groups) used to label them.
    """
    inv = inventory if inventory is not None else phonemes.load_default_inventory()
    if n_classes > inv.num_classes:
        raise ValueError(f"n_classes {n_classes} exceeds inventory size {inv.num_classes}")
    sub = phonemes.subset(inv, n_classes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xda7a]))
    bag = []
    records = []
    n_val = int(round(n_utts * val_fraction))
    for u in range(n_utts):
        count = int(np.clip(np.round(rng.normal(*phonemes_per_utt)), 1, 12))
        ids = []
        for _ in range(count):
            if not bag:
                bag = list(rng.permutation(n_classes))
            ids.append(int(bag.pop()))
        durations = [float(rng.uniform(*duration_ms_range)) for _ in ids]
        spec = SynthSpec(phoneme_ids=ids, durations_ms=durations,
                         seed=int(rng.integers(0, 2**31)),
                         lead_silence_ms=float(rng.uniform(50, 150)),
                         trail_silence_ms=float(rng.uniform(50, 150)))
        clip, _, _ = synth_utterance(spec)
        name = f"utt_{u:05d}.wav"
        write_wav(out / name, clip.samples, fmt="float32")
        split = "val" if u >= n_utts - n_val else "train"
        records.append(ManifestRecord(path=name, tokens=[sub.classes[c] for c in ids],
                                      lang=lang, split=split))

    save_manifest(records, out / "manifest.tsv")
    phonemes.save_inventory(sub, out / "inventory.tsv")
    return records
