# A short walk through the tape autodiff: build a graph, run backward,
# compare against finite differences, then fit a line with Adam.
import numpy as np

from quadlab import autodiff as ad
from quadlab.autodiff import Tensor

rng = np.random.default_rng(0)

# every op records its parents; backward() walks them in reverse
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 3)))
loss = ad.mean(ad.mul(ad.matmul(x, w), ad.matmul(x, w)))
ad.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

# the analytic gradient should agree with central differences to ~1e-9
err = ad.gradient_check(lambda: ad.mean(ad.mul(ad.matmul(x, w), ad.matmul(x, w))), {"w": w})
print("max relative error vs finite differences:", err)

# softmax rows always sum to one, even for huge logits
p = ad.softmax_rows(Tensor(np.array([[1000.0, 1001.0, 999.0]])))
print("softmax of large logits", p.data, "sum", p.data.sum())

# fit y = 3x - 1 with Adam
xs = rng.uniform(-1, 1, size=(64, 1))
ys = 3 * xs - 1
a = Tensor(np.zeros((1, 1)), requires_grad=True)
b = Tensor(np.zeros((1,)), requires_grad=True)
state = ad.AdamState()
for step in range(500):
    err = ad.sub(ad.add(ad.matmul(Tensor(xs), a), b), Tensor(ys))
    mse = ad.mean(ad.mul(err, err))
    ad.zero_grads([a, b])
    ad.backward(mse)
    ad.adam_step([a, b], [a.grad, b.grad], state, lr=0.05)
    if step % 100 == 0:
        print(f"step {step:3d}  mse {mse.item():.5f}")
print("fitted slope", a.data.item(), "intercept", b.data.item())

# checkpoints round-trip exactly
blob = ad.dump_tensors({"a": a, "b": b})
back = ad.parse_tensors(blob)
print("checkpoint bytes", len(blob), "identical:", np.array_equal(back["a"], a.data))
