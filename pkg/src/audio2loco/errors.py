class ConfigError(ValueError):
    """Invalid configuration value; ``path`` names the offending key (``ppo.clip``)."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class NumericalFailure(FloatingPointError):
    pass


class MissingArtifact(FileNotFoundError):
    """A pipeline stage was started before the artifact it depends on exists."""

    def __init__(self, name, path, hint=""):
        self.name = name
        msg = f"missing required artifact `{name}` (looked in {path})"
        if hint:
            msg += f"; {hint}"
        super().__init__(msg)
