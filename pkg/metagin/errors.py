class MetaGinError(Exception):
    """Base error. The harness annotates it with the failing repetition."""

    repetition = None

    def annotate(self, repetition: int) -> 'MetaGinError':
        self.repetition = repetition
        if self.args:
            self.args = (f'repetition {repetition}: {self.args[0]}',) + tuple(self.args[1:])
        else:
            self.args = (f'repetition {repetition}',)
        return self


class DataError(MetaGinError):
    pass


class GraphError(DataError):
    pass


class SamplingError(MetaGinError):
    pass


class ShapeError(MetaGinError, ValueError):
    pass


class ConfigError(MetaGinError, ValueError):
    pass


class DivergenceError(MetaGinError):
    """Non-finite loss or gradient. `state` holds the last finite TrainingState, if any."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state
