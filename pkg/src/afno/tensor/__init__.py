"""Numpy-backed tensors, radix-2 FFT and a reverse-mode tape."""

from . import ops
from .autograd import ContractError, ShapeError, Tape, Var, as_var, const, detach
from .fft import UnsupportedSizeError, fft_nd, fftfreq_int, ifft_nd, is_power_of_two

PRIMITIVES = {
    "add": ops.add,
    "sub": ops.sub,
    "mul": ops.mul,
    "scale": ops.scale,
    "matmul": ops.matmul,
    "channel_map": ops.channel_map,
    "gelu": ops.gelu,
    "modal_product": ops.modal_product,
    "fft": ops.fft,
    "ifft": ops.ifft,
    "dft_modes": ops.dft_modes,
    "idft_modes": ops.idft_modes,
    "real": ops.real,
    "to_complex": ops.to_complex,
    "complex_from_pair": ops.complex_from_pair,
    "conj": ops.conj,
    "take": ops.take,
    "pad": ops.pad,
    "roll": ops.roll,
    "concat": ops.concat,
    "stack": ops.stack,
    "reshape": ops.reshape,
    "broadcast_spatial": ops.broadcast_spatial,
    "sum": ops.sum,
    "mean": ops.mean,
    "square": ops.square,
    "abs2": ops.abs2,
}


def primitive_forward(op: str, inputs, tape: Tape | None = None, **kwargs) -> Var:
    """Apply a named primitive; the result is recorded on ``tape`` when operands live there."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    inputs = [as_var(x) for x in inputs]
    for x in inputs:
        if tape is not None and x.tape is not None and x.tape is not tape:
            raise ContractError(f"{op}: operand recorded on a different tape")
    if op in ("concat", "stack"):
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Var) -> dict[int, "object"]:
    return tape.backward(loss)


__all__ = [
    "ContractError", "PRIMITIVES", "ShapeError", "Tape", "UnsupportedSizeError", "Var",
    "as_var", "backward", "const", "detach", "fft_nd", "fftfreq_int", "ifft_nd",
    "is_power_of_two", "ops", "primitive_forward",
]
