__global__ void cast_half(const float* x, __half* y, size_t n) {
    size_t stride = (size_t)gridDim.x * blockDim.x;
    for (size_t i = blockIdx.x * blockDim.x + threadIdx.x; i < n; i += stride) y[i] = __float2half(x[i]);
}
