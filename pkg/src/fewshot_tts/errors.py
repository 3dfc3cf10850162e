"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a programming error and crashes.
"""


class FewshotTtsError(Exception):
    """Base class for package errors."""


class ConfigError(FewshotTtsError):
    """Invalid configuration or invalid combination of options."""


class DataError(FewshotTtsError):
    """Corpus / checkpoint / manifest files that are missing or malformed."""


class CorpusFormatError(DataError):
    """A corpus file failed to parse; message carries file and record context."""


class CheckpointError(DataError):
    """A checkpoint failed validation against its model configuration."""


class NumericError(FewshotTtsError):
    """Training produced a non-finite loss."""


class SamplingError(FewshotTtsError):
    """An episode could not be sampled (insufficient utterances)."""


class UnknownSpeakerError(KeyError):
    """Table-mode lookup of a speaker id with no embedding row.

    Signals the unseen-speaker case that requires re-initializing the table.
    """

    def __init__(self, speaker_id: int):
        super().__init__(speaker_id)
        self.speaker_id = speaker_id

    def __str__(self) -> str:  # KeyError quotes its arg; keep a readable message
        return f"no embedding row for speaker id {self.speaker_id}"
