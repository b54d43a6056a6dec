#include <stdio.h>
#include <string.h>
#include "gemuco.h"

int main(void) {
    const char *v = gemuco_version();
    if (v == NULL || strlen(v) == 0) return 1;

    GemucoModel *m = NULL;
    if (gemuco_model_load("/nonexistent/model.json", &m) != GEMUCO_STATUS_IO) return 2;
    if (m != NULL) return 3;
    if (gemuco_last_error() == NULL) return 4;

    double rows[40];
    for (int i = 0; i < 40; i++) rows[i] = (double)((i * 7) % 11) - 5.0;
    GemucoDetector *d = NULL;
    if (gemuco_detector_calibrate(rows, 20, 2, &d) != GEMUCO_STATUS_OK) return 5;
    double e[2] = {100.0, -100.0};
    double score = 0.0;
    bool flag = false;
    if (gemuco_detector_score(d, e, 2, &score, &flag) != GEMUCO_STATUS_OK || !flag) return 6;
    gemuco_detector_free(d);
    printf("%s ok\n", v);
    return 0;
}
