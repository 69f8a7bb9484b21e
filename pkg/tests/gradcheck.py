"""Central finite-difference checks of the full dual-head loss with cross-head targets held fixed."""

import torch

from chsnet.model import CHSNet
from chsnet.supervision import chs_loss


def loss_with_fixed_targets(model, x, targets):
    p = model(x)
    conv_t, tran_t = targets
    return ((p.conv - conv_t) ** 2).mean() + ((p.tran - tran_t) ** 2).mean()


def check_model_gradients(model: CHSNet, x, gt, delta, alpha, eps=1e-6, per_tensor=6, generator=None):
    """Return ``{param_name: (max_abs_err, max_rel_err)}`` over sampled coordinates of every parameter.

    Targets are the detached cross-head targets from the unperturbed forward,
    so the finite differences see the same function that back-propagation does.
    """
    model.train()
    p = model(x)
    res = chs_loss(p.conv, p.tran, gt, delta, alpha)
    res.loss.backward()
    targets = (res.conv_target.detach(), res.tran_target.detach())
    analytic = {n: q.grad.detach().clone() for n, q in model.named_parameters()}
    # the loss rebuilt from fixed targets must equal the one we differentiated
    with torch.no_grad():
        assert torch.allclose(loss_with_fixed_targets(model, x, targets), res.loss, rtol=0, atol=1e-12)

    errors = {}
    for name, q in model.named_parameters():
        flat = q.data.view(-1)
        n = flat.numel()
        idx = torch.randperm(n, generator=generator)[:per_tensor]
        worst_abs, worst_rel = 0.0, 0.0
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_with_fixed_targets(model, x, targets).item()
                flat[i] = orig - eps
                down = loss_with_fixed_targets(model, x, targets).item()
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            an = analytic[name].view(-1)[i].item()
            err = abs(fd - an)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(fd), abs(an), 1e-30))
            if err > 1e-5 + 1e-3 * max(abs(fd), abs(an)):
                errors.setdefault("_failures", []).append((name, i, an, fd))
        errors[name] = (worst_abs, worst_rel)
    return errors
