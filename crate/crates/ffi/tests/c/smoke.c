#include <math.h>
#include <stdio.h>
#include "latstab.h"

int main(void) {
    LatstabKsSolver *solver = NULL;
    if (latstab_ks_solver_new(22.0, 32, 0.05, &solver) != LATSTAB_STATUS_OK) return 1;
    double u[32];
    for (int i = 0; i < 32; i++) {
        double x = 22.0 * i / 32.0;
        u[i] = cos(6.283185307179586 * x / 22.0);
    }
    if (latstab_ks_step(solver, u, 32, 10) != LATSTAB_STATUS_OK) return 2;
    double a[3] = {0.0, 1.0, 2.0}, b[3] = {1.0, 2.0, 3.0}, d = 0.0;
    if (latstab_wasserstein1(a, 3, b, 3, &d) != LATSTAB_STATUS_OK || fabs(d - 1.0) > 1e-12) return 3;
    if (latstab_ks_solver_new(22.0, 30, 0.05, &solver) != LATSTAB_STATUS_CONFIG) return 4;
    char msg[256];
    if (latstab_last_error(msg, sizeof msg) == 0) return 5;
    latstab_ks_solver_free(solver);
    printf("ok %s\n", msg);
    return 0;
}
