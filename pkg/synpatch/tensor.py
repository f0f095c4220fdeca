""" Dense tensor primitives and suffix reverse-mode gradients.

Tensors are torch tensors. Every primitive checks its inputs' shapes and
raises NonFiniteError if its output holds NaN or Inf.

The SuffixTape records the computation from one seed activation to a scalar
loss with torch autograd. Model weights never require gradients, so the only
leaf a tape differentiates is its seed.
"""

# 3rd party imports.
import torch
import torch.nn.functional as F

# Local imports.
from .errors import NonFiniteError, ShapeError, TapeError

#------------------------------------------------------------------------------
# Constants.
dtypes = {
    "f32": torch.float32,
    "f64": torch.float64
}

default_dtype = "f32"

# Inverse frequency base for rotary embeddings (GPT-NeoX).
rotary_base = 10000

def get_dtype(name):
    """ Look up a torch dtype by its short name ("f32" or "f64").
    """
    if isinstance(name, torch.dtype):
        return name
    if name not in dtypes:
        raise ValueError(f"unknown dtype '{name}', expected one of {sorted(dtypes)}")
    return dtypes[name]

def check_finite(x, what="tensor"):
    """ Raise NonFiniteError if x holds NaN or Inf.
    """
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x

#------------------------------------------------------------------------------
# Primitives.

def matmul(a, b):
    """ Matrix product, batched over leading dimensions.
    """
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError("matmul needs tensors with at least one dimension")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeError(f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return check_finite(torch.matmul(a, b), "matmul output")

def softmax_lastdim(x):
    """ Softmax over the last dimension.

    torch subtracts the slice maximum before exponentiating, so large inputs
    don't overflow.
    """
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax over an empty last dimension")
    return check_finite(torch.softmax(x, dim=-1), "softmax output")

def log_softmax_lastdim(x):
    """ Log-softmax over the last dimension.
    """
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ShapeError("log_softmax over an empty last dimension")
    return check_finite(torch.log_softmax(x, dim=-1), "log_softmax output")

def layer_norm(x, gain, bias, eps=1e-5):
    """ Normalise each last-dimension slice to zero mean and unit variance,
    then apply gain and bias.
    """
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm gain/bias {tuple(gain.shape)}/{tuple(bias.shape)} don't match width {width}"
        )
    return check_finite(F.layer_norm(x, (width,), gain, bias, eps), "layer_norm output")

def gelu(x):
    """ Exact (erf based) GELU.
    """
    return F.gelu(x)

def causal_mask(n, device=None):
    """ Lower triangular boolean mask; True where attention is allowed.
    """
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()

def rotary_apply(x, position, rotary_fraction, base=rotary_base):
    """ Rotate the leading rotary_fraction of the head dimension (GPT-NeoX).

    x is (..., seq, d_head) with position a tensor of seq positions, or
    (..., d_head) with position an int. Dimension i is paired with
    i + rot/2 inside the rotated block; the rest passes through.
    """
    d_head = x.shape[-1]
    rot = int(rotary_fraction * d_head)
    if rot == 0:
        return x
    if rot % 2 != 0:
        raise ShapeError(f"rotated width {rot} is odd (d_head {d_head}, fraction {rotary_fraction})")

    positions = torch.as_tensor(position, dtype=x.dtype, device=x.device)
    inv_freq = 1.0 / (base ** (torch.arange(0, rot, 2, dtype=x.dtype, device=x.device) / rot))
    angles = positions.unsqueeze(-1) * inv_freq
    angles = torch.cat((angles, angles), dim=-1)
    cos, sin = angles.cos(), angles.sin()

    x_rot, x_pass = x[..., :rot], x[..., rot:]
    half = rot // 2
    rotated_half = torch.cat((-x_rot[..., half:], x_rot[..., :half]), dim=-1)
    x_rot = (x_rot * cos) + (rotated_half * sin)
    return check_finite(torch.cat((x_rot, x_pass), dim=-1), "rotary output")

#------------------------------------------------------------------------------
# Suffix reverse-mode differentiation.

class SuffixTape:
    """ Records the computation from one seed activation to a scalar loss.

    fn maps a seed tensor to a scalar loss tensor. record() runs it with
    gradient tracking; replay() runs it again without. A tape hands out one
    gradient and is then spent.

    Example:

    tape = SuffixTape(lambda seed: (seed ** 2).sum(), value, site="resid.1@-1")
    loss = tape.record()
    grad = vjp_seed_gradient(tape, loss)
    """

    def __init__(self, fn, seed_value, site=""):
        self.fn = fn
        self.site = site
        self.seed = seed_value.detach().clone().requires_grad_(True)
        self.loss = None
        self.spent = False

    def record(self):
        """ Run fn on the seed, recording the graph. Returns the loss tensor.
        """
        if self.spent:
            raise TapeError(f"tape for '{self.site}' was already used")
        with torch.enable_grad():
            loss = self.fn(self.seed)
        if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
            raise TapeError(f"tape for '{self.site}' recorded a non-scalar loss")
        self.loss = loss.reshape(())
        return self.loss

    def replay(self, seed=None):
        """ Re-run the recorded computation without gradients.

        With no argument this reproduces the recorded loss exactly.
        """
        value = self.seed.detach() if seed is None else seed
        with torch.no_grad():
            return self.fn(value).reshape(())

def vjp_seed_gradient(tape, loss):
    """ d(loss)/d(seed) for a recorded tape.

    Downstream weights are constants; only the seed is differentiated.
    """
    if tape.spent:
        raise TapeError(f"tape for '{tape.site}' was already used")
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise TapeError("gradient requested for a non-scalar loss")
    if tape.loss is None or loss is not tape.loss:
        raise TapeError(f"tape for '{tape.site}' is incomplete: loss was not recorded on it")
    tape.spent = True

    if not loss.requires_grad:
        # Loss doesn't depend on the seed at all.
        return torch.zeros_like(tape.seed)
    (grad,) = torch.autograd.grad(loss, tape.seed, allow_unused=True)
    if grad is None:
        return torch.zeros_like(tape.seed)
    return check_finite(grad, "seed gradient")
