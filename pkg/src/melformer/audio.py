"""Audio frontend: WAV decoding, framing, and 128-bin log filterbank features.

The feature pipeline is load_wav -> frame_signal -> log_mel ->
normalize_and_prepend_dummy.  Everything here is a pure function of the
input bytes, so utterances can be featurized in parallel and cached.

Choices the pipeline commits to (they affect reproducibility):
no pre-emphasis, Hann window, HTK mel scale 2595*log10(1 + f/700),
log compression with a 1e-10 floor, per-utterance per-channel
normalization, and an all-zero dummy row prepended at position 0.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, ValidationError

N_MELS = 128
FRAME_MS = 25
HOP_MS = 12
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

CACHE_MAGIC = b"MEL1"


@dataclass
class MelMatrix:
    frames: np.ndarray      # [T, 128] float64 rows of log filterbank energies
    sample_rate: int
    has_dummy: bool = False


# ---------------------------------------------------------------------------
# WAV decoding

def load_wav(path):
    """Decode a RIFF/WAVE file with 16-bit PCM samples.

    Returns (samples, sample_rate) with samples scaled by 1/32768 and
    multi-channel audio downmixed by averaging.  Parsing is done by hand so
    malformed files produce errors that name the offending chunk.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise IOError(f"{path}: truncated before RIFF header")
    if raw[0:4] != b"RIFF":
        raise FormatError(f"{path}: missing RIFF chunk")
    if raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: RIFF form type is {raw[8:12]!r}, not WAVE")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body_start = pos + 8
        if body_start + size > len(raw):
            raise IOError(f"{path}: {chunk_id.decode('ascii', 'replace')} chunk truncated")
        body = raw[body_start:body_start + size]
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too small ({size} bytes)")
            audio_format, channels, sample_rate, _, _, bits = struct.unpack_from("<HHIIHH", body, 0)
            if audio_format != 1:
                raise FormatError(f"{path}: fmt chunk declares codec {audio_format}, only PCM (1) is supported")
            if bits != 16:
                raise FormatError(f"{path}: fmt chunk declares {bits}-bit samples, only 16-bit is supported")
            if channels < 1:
                raise FormatError(f"{path}: fmt chunk declares {channels} channels")
            fmt = (channels, sample_rate)
        elif chunk_id == b"data":
            data = body
        # unknown chunks (LIST, fact, ...) are skipped; chunks are word-aligned
        pos = body_start + size + (size & 1)

    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")

    channels, sample_rate = fmt
    frame_bytes = 2 * channels
    usable = len(data) - (len(data) % frame_bytes)
    pcm = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64)
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return pcm / 32768.0, sample_rate


# ---------------------------------------------------------------------------
# Framing and filterbank

def frame_signal(samples, sample_rate):
    """Slice a signal into Hann-windowed frames (25 ms window, 12 ms hop).

    Emits 1 + floor((L - win)/hop) frames; a trailing partial window is
    dropped rather than padded.
    """
    samples = np.asarray(samples, dtype=np.float64)
    win = sample_rate * FRAME_MS // 1000
    hop = sample_rate * HOP_MS // 1000
    if len(samples) < win:
        raise ValidationError(
            f"signal of {len(samples)} samples is shorter than one {win}-sample window")
    n_frames = 1 + (len(samples) - win) // hop
    window = np.hanning(win)
    starts = np.arange(n_frames) * hop
    frames = np.stack([samples[s:s + win] for s in starts])
    return frames * window


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels=N_MELS):
    """Triangular mel filters evaluated at the FFT bin center frequencies.

    Returns (weights[n_mels, n_fft//2+1], center_freqs[n_mels]).  Filter
    edges are spaced uniformly in mel between 0 Hz and Nyquist.
    """
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = np.zeros((n_mels, len(bin_hz)))
    for k in range(n_mels):
        left, center, right = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        up = (bin_hz - left) / max(center - left, 1e-12)
        down = (right - bin_hz) / max(right - center, 1e-12)
        weights[k] = np.maximum(0.0, np.minimum(up, down))
    return weights, edges_hz[1:-1]


def log_mel(frames, sample_rate):
    """Log mel filterbank energies for pre-windowed frames -> MelMatrix."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValidationError(f"expected a nonempty [frames, window] array, got shape {frames.shape}")
    win = frames.shape[1]
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    weights, _ = mel_filterbank(sample_rate, n_fft)
    energies = power @ weights.T
    return MelMatrix(frames=np.log(energies + LOG_FLOOR), sample_rate=sample_rate)


def normalize_and_prepend_dummy(mel: MelMatrix) -> MelMatrix:
    """Per-channel mean/variance normalization, then a zero row at position 0."""
    if mel.has_dummy:
        raise ContractError("mel matrix already has a dummy row prepended")
    x = mel.frames
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    normed = (x - mean) / std
    out = np.vstack([np.zeros((1, x.shape[1])), normed])
    return MelMatrix(frames=out, sample_rate=mel.sample_rate, has_dummy=True)


def featurize_wav(path) -> MelMatrix:
    """Full pipeline: WAV file to normalized feature matrix with dummy row."""
    samples, sr = load_wav(path)
    return normalize_and_prepend_dummy(log_mel(frame_signal(samples, sr), sr))


# ---------------------------------------------------------------------------
# Feature cache

def mel_cache_bytes(mel: MelMatrix) -> bytes:
    """Serialized form of a finalized feature matrix, little-endian f32."""
    if not mel.has_dummy:
        raise ContractError("refusing to cache a feature matrix without its dummy row")
    rows, cols = mel.frames.shape
    return CACHE_MAGIC + struct.pack("<II", rows, cols) + mel.frames.astype("<f4").tobytes()


def write_mel_cache(path, mel: MelMatrix):
    with open(path, "wb") as fh:
        fh.write(mel_cache_bytes(mel))


def read_mel_cache(path, sample_rate=16000) -> MelMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CACHE_MAGIC!r}")
    if len(raw) < 12:
        raise IOError(f"{path}: truncated header")
    rows, cols = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * rows * cols
    if len(raw) < expected:
        raise IOError(f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(raw)}")
    frames = np.frombuffer(raw[12:expected], dtype="<f4").reshape(rows, cols).astype(np.float64)
    return MelMatrix(frames=frames, sample_rate=sample_rate, has_dummy=True)
