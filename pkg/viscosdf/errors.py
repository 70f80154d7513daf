class ViscoSDFError(Exception):
    """Base class for every error raised on purpose by viscosdf"""

    exit_code = 1


class ConfigError(ViscoSDFError, ValueError):
    """Invalid run configuration: schedules, CFL violations, bad arguments"""

    exit_code = 2


class DataError(ViscoSDFError, ValueError):
    """Unreadable or malformed input file"""

    exit_code = 3

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class NonFiniteError(ViscoSDFError, FloatingPointError):
    """A jet, loss term or gradient stopped being finite"""

    exit_code = 4

    def __init__(
        self,
        term: str,
        iteration: int | None = None,
        epsilon: float | None = None,
    ):
        self.term = term
        self.iteration = iteration
        self.epsilon = epsilon
        parts = [f"non-finite value in {term!r}"]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if epsilon is not None:
            parts.append(f"epsilon={epsilon:g}")
        super().__init__(", ".join(parts))
