"""Exception type shared by every vrsniff module."""


class VrsniffError(Exception):
    """A data or configuration error with a stable machine-readable code.

    ``code`` is one of the upper-case identifiers used throughout the package
    (``MALFORMED_HEADER``, ``EMPTY_TRACE``, ``BAD_ROW`` ...). ``context`` holds
    any structured detail, e.g. the offending line number for ``BAD_ROW``.
    """

    def __init__(self, code: str, message: str = "", **context):
        self.code = code
        self.context = context
        super().__init__(f"{code}: {message}" if message else code)
