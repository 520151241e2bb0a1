constexpr int kThreads = 512;
__global__ void scale(float* x, float s, int n) {
    int i = blockIdx.x * kThreads + threadIdx.x;
    if (i < n) x[i] *= s;
}
