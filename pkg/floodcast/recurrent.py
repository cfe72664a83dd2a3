import torch
from torch.autograd.function import once_differentiable


def _check(name: str, tensor: torch.Tensor, shape):
    if tuple(tensor.shape) != tuple(shape):
        raise ValueError(f"'{name}' must have shape {tuple(shape)}, got {tuple(tensor.shape)}")


class LSTMRecurrence(torch.autograd.Function):
    @staticmethod
    def forward(
        ctx,
        inp: torch.Tensor,
        h_init: torch.Tensor,
        c_init: torch.Tensor,
        weight_ih: torch.Tensor,
        weight_hh: torch.Tensor,
        bias: torch.Tensor,
    ):
        """
        Evolve an LSTM cell over a sequence as
        z_t = W_ih x_t + W_hh h_{t-1} + b
        c_t = f_t * c_{t-1} + i_t * g_t
        h_t = o_t * tanh(c_t)

        Gates are stacked in the order input, forget, cell, output, the same
        layout as torch.nn.LSTM, so parameters can be exchanged between both.

        Parameters
        ----------
        inp: torch.Tensor
            3D input tensor, shape (batch, time, features).
        h_init: torch.Tensor
            2D initial hidden state, shape (batch, hidden).
        c_init: torch.Tensor
            2D initial cell state, shape (batch, hidden).
        weight_ih: torch.Tensor
            Input weights, shape (4*hidden, features).
        weight_hh: torch.Tensor
            Recurrent weights, shape (4*hidden, hidden).
        bias: torch.Tensor
            1D gate bias, shape (4*hidden,).

        Returns
        -------
        (torch.Tensor, torch.Tensor)
            Hidden and cell states at every time step, each (batch, time, hidden).
        """

        if not inp.ndim == 3:
            raise ValueError("'inp' must be 3D, (batch, time, features)")
        if not inp.shape[1] > 0:
            raise ValueError("'inp' must have at least one time step")
        batch, n_steps, n_features = inp.shape
        if not weight_hh.ndim == 2:
            raise ValueError("'weight_hh' must be 2D, (4*hidden, hidden)")
        hidden = weight_hh.shape[1]
        _check("weight_hh", weight_hh, (4 * hidden, hidden))
        _check("weight_ih", weight_ih, (4 * hidden, n_features))
        _check("bias", bias, (4 * hidden,))
        _check("h_init", h_init, (batch, hidden))
        _check("c_init", c_init, (batch, hidden))

        x_proj = torch.matmul(inp, weight_ih.t()) + bias
        gates = inp.new_empty(batch, n_steps, 4 * hidden)
        h_seq = inp.new_empty(batch, n_steps, hidden)
        c_seq = inp.new_empty(batch, n_steps, hidden)

        h, c = h_init, c_init
        for t in range(n_steps):
            z = x_proj[:, t] + torch.matmul(h, weight_hh.t())
            i, f, g, o = z.chunk(4, dim=1)
            i, f, g, o = torch.sigmoid(i), torch.sigmoid(f), torch.tanh(g), torch.sigmoid(o)
            c = f * c + i * g
            h = o * torch.tanh(c)
            gates[:, t] = torch.cat((i, f, g, o), dim=1)
            h_seq[:, t] = h
            c_seq[:, t] = c

        ctx.save_for_backward(inp, h_init, c_init, weight_ih, weight_hh, gates, h_seq, c_seq)
        return h_seq, c_seq

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_h_seq, grad_c_seq):
        inp, h_init, c_init, weight_ih, weight_hh, gates, h_seq, c_seq = ctx.saved_tensors
        n_steps = inp.shape[1]
        if grad_h_seq is None:
            grad_h_seq = torch.zeros_like(h_seq)
        if grad_c_seq is None:
            grad_c_seq = torch.zeros_like(c_seq)

        grad_z = torch.empty_like(gates)
        dh_next = torch.zeros_like(h_init)
        dc_next = torch.zeros_like(c_init)
        for t in reversed(range(n_steps)):
            i, f, g, o = gates[:, t].chunk(4, dim=1)
            c_prev = c_seq[:, t - 1] if t > 0 else c_init
            tanh_c = torch.tanh(c_seq[:, t])

            dh = grad_h_seq[:, t] + dh_next
            dc = grad_c_seq[:, t] + dc_next + dh * o * (1 - tanh_c**2)
            grad_z[:, t] = torch.cat(
                (
                    dc * g * i * (1 - i),
                    dc * c_prev * f * (1 - f),
                    dc * i * (1 - g**2),
                    dh * tanh_c * o * (1 - o),
                ),
                dim=1,
            )
            dc_next = dc * f
            dh_next = torch.matmul(grad_z[:, t], weight_hh)

        h_prev = torch.cat((h_init.unsqueeze(1), h_seq[:, :-1]), dim=1)
        grad_inp = torch.matmul(grad_z, weight_ih) if ctx.needs_input_grad[0] else None
        grad_weight_ih = torch.einsum("btg,btf->gf", grad_z, inp) if ctx.needs_input_grad[3] else None
        grad_weight_hh = torch.einsum("btg,bth->gh", grad_z, h_prev) if ctx.needs_input_grad[4] else None
        grad_bias = grad_z.sum(dim=(0, 1)) if ctx.needs_input_grad[5] else None

        # Gradients w.r.t. the initial states are what flows out of step 0.
        return grad_inp, dh_next, dc_next, grad_weight_ih, grad_weight_hh, grad_bias


def lstm_recurrence(inp, h_init, c_init, weight_ih, weight_hh, bias):
    """Functional form of ``LSTMRecurrence``, returns the hidden state sequence only"""
    h_seq, _ = LSTMRecurrence.apply(inp, h_init, c_init, weight_ih, weight_hh, bias)
    return h_seq


def lstm_step(x_t, h, c, weight_ih, weight_hh, bias):
    """
    One LSTM cell update.

    Parameters
    ----------
    x_t: torch.Tensor
        Input at this step, shape (..., features).
    h, c: torch.Tensor
        Hidden and cell state, shape (..., hidden).
    weight_ih, weight_hh, bias: torch.Tensor
        Gate parameters stacked as input, forget, cell, output.

    Returns
    -------
    (torch.Tensor, torch.Tensor)
        Updated ``(h, c)``.
    """
    hidden = h.shape[-1]
    if weight_hh.shape != (4 * hidden, hidden):
        raise ValueError(f"'weight_hh' must have shape {(4 * hidden, hidden)}, got {tuple(weight_hh.shape)}")
    if weight_ih.shape != (4 * hidden, x_t.shape[-1]):
        raise ValueError(f"'weight_ih' must have shape {(4 * hidden, x_t.shape[-1])}, got {tuple(weight_ih.shape)}")
    if c.shape != h.shape:
        raise ValueError("'c' must have the same shape as 'h'")
    z = torch.matmul(x_t, weight_ih.t()) + torch.matmul(h, weight_hh.t()) + bias
    i, f, g, o = z.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    return torch.sigmoid(o) * torch.tanh(c), c
