"""Exception hierarchy shared across the pipeline."""


class AudioPrefixError(Exception):
    """Base class for all library errors."""


# --- dataset / manifest errors ---

class MalformedManifest(AudioPrefixError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"manifest line {line}: {reason}")


class DuplicateAudioId(AudioPrefixError):
    def __init__(self, audio_id: str, line: int):
        self.audio_id = audio_id
        self.line = line
        super().__init__(f"duplicate audio_id {audio_id!r} at line {line}")


class EmptyCorpus(AudioPrefixError):
    pass


class ManifestMissing(AudioPrefixError):
    pass


class IdMismatch(AudioPrefixError):
    def __init__(self, missing: list):
        self.missing = sorted(missing)
        super().__init__(f"audio ids without a counterpart: {self.missing}")


# --- audio errors ---

class AudioLoadError(AudioPrefixError):
    def __init__(self, path, reason: str = "", audio_id: str | None = None):
        self.path = path
        self.audio_id = audio_id
        tag = f" (audio_id={audio_id})" if audio_id else ""
        super().__init__(f"cannot load audio {path}{tag}: {reason}")


class UnsupportedFormat(AudioLoadError):
    pass


class ConfigMismatch(AudioPrefixError):
    pass


# --- model errors ---

class ShapeMismatch(AudioPrefixError):
    pass


class DimensionMismatch(AudioPrefixError):
    pass


class LengthMismatch(AudioPrefixError):
    pass


class CheckpointMismatch(AudioPrefixError):
    def __init__(self, tensor_name: str, reason: str):
        self.tensor_name = tensor_name
        super().__init__(f"checkpoint tensor {tensor_name!r}: {reason}")


class FrozenViolation(AudioPrefixError):
    def __init__(self, group: str, max_diff: float):
        self.group = group
        self.max_diff = max_diff
        super().__init__(f"frozen group {group!r} changed (max |diff| = {max_diff:g})")


class VocabTooSmall(AudioPrefixError):
    pass


class NonFiniteLoss(AudioPrefixError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


# --- evaluation / retrieval errors ---

class MalformedSpiceFile(AudioPrefixError):
    pass


class EmptyIndex(AudioPrefixError):
    pass


# --- CLI errors ---

class ConfigError(AudioPrefixError):
    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"config key {key!r}: {reason}")


class SingleDocumentCorpusWarning(UserWarning):
    """IDF is degenerate with a single scored audio."""
