import torch
from torch.utils.cpp_extension import load_inline

src = r"""
#include <torch/extension.h>
__global__ void relu4(const float4* __restrict__ x, float4* __restrict__ y, int n4) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n4) {
        float4 v = x[i];
        v.x = fmaxf(v.x, 0.f); v.y = fmaxf(v.y, 0.f); v.z = fmaxf(v.z, 0.f); v.w = fmaxf(v.w, 0.f);
        y[i] = v;
    }
}
torch::Tensor relu(torch::Tensor x) {
    auto y = torch::empty_like(x);
    const int threads = 128;
    int n4 = x.numel() / 4;
    relu4<<<(n4 + threads - 1) / threads, threads>>>((const float4*)x.data_ptr<float>(), (float4*)y.data_ptr<float>(), n4);
    return y;
}
"""
ext = load_inline(name="relu4", cpp_sources="torch::Tensor relu(torch::Tensor x);", cuda_sources=src, functions=["relu"])

class ModelNew(torch.nn.Module):
    def forward(self, x):
        return ext.relu(x)
