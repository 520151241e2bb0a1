__global__ void gelu_fast(const float* x, float* y, int n) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n) {
        float v = x[i];
        float t = __expf(-1.702f * v);
        y[i] = __fdividef(v, 1.0f + t);
    }
}
