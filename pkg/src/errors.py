from pathlib import Path
from typing import Optional, Union


class InputError(ValueError):
    """Malformed input file: names the file, where it went wrong and what was expected."""

    def __init__(
        self,
        path: Union[str, Path],
        message: str,
        location: Optional[str] = None,
        expected: Optional[str] = None,
    ):
        self.path = Path(path)
        self.location = location
        self.expected = expected
        self.message = message
        text = f"{self.path}"
        if location:
            text += f" ({location})"
        text += f": {message}"
        if expected:
            text += f" (expected {expected})"
        super().__init__(text)


class ConfigError(ValueError):
    pass
