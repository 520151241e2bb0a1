__device__ float activate(float v) { return tanhf(v) + expf(v); }
__global__ void apply(float* x, int n) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n) x[i] = activate(x[i]);
}
