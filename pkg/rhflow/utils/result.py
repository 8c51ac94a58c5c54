from typing import TypeVar, Generic, Optional, Any

T = TypeVar('T')

class Result(Generic[T]):
    """Outcome of an operation that may fail without raising.

    `hint` carries follow-up data for the caller, e.g. the suggested step
    size after a rejected time step.
    """
    def __init__(self, value: Optional[T] = None, error: Optional[str] = None, hint: Any = None):
        self.value = value
        self.error = error
        self.hint = hint
        self.success = error is None

    @staticmethod
    def ok(value: T) -> 'Result[T]':
        return Result(value=value)

    @staticmethod
    def err(error: str, hint: Any = None) -> 'Result[T]':
        return Result(error=error, hint=hint)

    def unwrap(self) -> T:
        if not self.success:
            raise ValueError(self.error)
        return self.value
