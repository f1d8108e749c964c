#include <math.h>
#include <stdio.h>
#include <string.h>

#include "regstab.h"

static const char *CONFIG =
    "{\"system\": {\"id\": \"unit_speed_line\", \"with_cost\": true},"
    " \"mrf\": \"abs:2\", \"p0\": 1.0,"
    " \"region\": {\"by\": \"distance\", \"lo\": 0.05, \"hi\": 1.0}}";

int main(void) {
    RegstabModel *model = NULL;
    if (regstab_model_from_json(CONFIG, &model) != REGSTAB_STATUS_OK) {
        fprintf(stderr, "model: %s\n", regstab_last_error_message());
        return 1;
    }
    double x[1] = {-0.75}, w = 0.0, g[1] = {0.0};
    if (regstab_model_value(model, x, 1, &w) != REGSTAB_STATUS_OK || fabs(w - 1.5) > 1e-15) return 2;
    if (regstab_model_gradient(model, x, 1, g) != REGSTAB_STATUS_OK || g[0] != -2.0) return 3;
    if (regstab_model_value(model, x, 2, &w) != REGSTAB_STATUS_DIMENSION_MISMATCH) return 4;
    regstab_model_free(model);

    char *report = NULL;
    int32_t code = -1;
    if (regstab_run("certify", CONFIG, NULL, NULL, &report, &code) != REGSTAB_STATUS_OK) return 5;
    if (code != 0 || strstr(report, "\"stable\": true") == NULL) return 6;
    regstab_string_free(report);
    printf("ok %s\n", regstab_version());
    return 0;
}
