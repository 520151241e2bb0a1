import torch
import torch.nn as nn
from torch.utils.cpp_extension import load_inline

cuda_source = """
#include <torch/extension.h>
__global__ void silu_kernel(const float* x, float* y, int n) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n) {
        float v = x[i];
        y[i] = v / (1.0f + expf(-v));
    }
}
torch::Tensor silu(torch::Tensor x) {
    auto y = torch::empty_like(x);
    int n = x.numel();
    silu_kernel<<<(n + 255) / 256, 256>>>(x.data_ptr<float>(), y.data_ptr<float>(), n);
    return y;
}
"""
cpp_source = "torch::Tensor silu(torch::Tensor x);"
silu_ext = load_inline(name="silu_ext", cpp_sources=cpp_source, cuda_sources=cuda_source, functions=["silu"])

class ModelNew(nn.Module):
    """Applies SiLU with a custom kernel (a faster double-precision variant is future work)."""
    def forward(self, x):
        return silu_ext.silu(x)
