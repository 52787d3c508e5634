#include <stdio.h>
#include <string.h>
#include "pivflow.h"

/* Uniform shift of a small random cloud; prints the mean estimated x displacement. */
int main(void) {
    enum { N = 400 };
    static double a[4 * N], b[4 * N];
    unsigned s = 12345u;
    for (int i = 0; i < N; i++) {
        for (int k = 0; k < 3; k++) {
            s = s * 1103515245u + 12345u;
            a[4 * i + k] = 2.0 + 28.0 * (double)(s >> 8) / 16777216.0;
        }
        a[4 * i + 3] = 1.0;
        memcpy(&b[4 * i], &a[4 * i], 4 * sizeof(double));
        b[4 * i] += 1.0;
    }
    PivParticles *t0 = NULL, *t1 = NULL;
    if (piv_particles_new(a, N, &t0) != PIV_STATUS_OK) return 1;
    if (piv_particles_new(b, N, &t1) != PIV_STATUS_OK) return 1;

    PivFlowOptions o;
    piv_flow_options_default(&o);
    o.pyramid_levels = 3;
    o.warps_per_level = 3;
    o.inner_iterations = 30;
    size_t extents[3] = {32, 32, 32};
    PivFlow *f = NULL;
    if (piv_flow_solve(t0, t1, extents, &o, &f) != PIV_STATUS_OK) {
        fprintf(stderr, "%s\n", piv_last_error());
        return 2;
    }
    size_t dims[3], stride;
    piv_flow_shape(f, dims, &stride);
    size_t n = dims[0] * dims[1] * dims[2];
    static double v[3 * 9 * 9 * 9];
    if (n > 9 * 9 * 9 || piv_flow_vectors(f, v, 3 * n) != PIV_STATUS_OK) return 3;
    double mean = 0.0;
    for (size_t i = 0; i < n; i++) mean += v[3 * i];
    printf("%.4f\n", mean / (double)n);

    if (piv_particles_read_csv("/nonexistent/p.csv", &t0) != PIV_STATUS_IO) return 4;
    if (strlen(piv_last_error()) == 0) return 5;

    piv_flow_free(f);
    piv_particles_free(t0);
    piv_particles_free(t1);
    return 0;
}
