__global__ void saxpy_unrolled(int n, float a, const float* __restrict x, float* __restrict y) {
    int base = (blockIdx.x * blockDim.x + threadIdx.x) * 4;
#pragma unroll
    for (int j = 0; j < 4; ++j) {
        int i = base + j;
        if (i < n) y[i] = a * x[i] + y[i];
    }
}
