"""Error taxonomy shared by the library and the CLI exit-code contract."""


class DataError(Exception):
    """Missing, corrupt, or inconsistent on-disk data (corpus, checkpoint)."""


class NumericError(Exception):
    """Non-finite or numerically invalid quantity encountered mid-computation."""


class UsageError(Exception):
    """Invalid invocation: bad flag combination or out-of-range argument."""
