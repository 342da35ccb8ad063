#include <stdio.h>
#include <string.h>
#include "q16.h"

int main(int argc, char **argv) {
    if (argc != 4) return 64;
    Q16Store *store = NULL;
    Q16Model *model = NULL;
    Q16Report *report = NULL;
    if (q16_store_load(argv[1], &store) != Q16_STATUS_OK) { fprintf(stderr, "%s\n", q16_last_error()); return 1; }
    if (q16_model_load(argv[2], &model) != Q16_STATUS_OK) { fprintf(stderr, "%s\n", q16_last_error()); return 1; }
    if (q16_scan(store, model, 0.5, false, "fixture", &report) != Q16_STATUS_OK) return 1;
    double ratio = 0.0;
    if (q16_report_ratio(report, &ratio) != Q16_STATUS_OK) return 1;
    if (q16_report_write(report, argv[3]) != Q16_STATUS_OK) return 1;
    Q16Store *missing = NULL;
    if (q16_store_load("/nonexistent.meta.json", &missing) != Q16_STATUS_IO || missing != NULL) return 2;
    if (strlen(q16_last_error()) == 0) return 3;
    printf("%s %zu %zu %zu %.6f\n", q16_version(), q16_store_count(store), q16_report_total(report),
           q16_report_flagged(report), ratio);
    q16_report_free(report);
    q16_model_free(model);
    q16_store_free(store);
    return 0;
}
