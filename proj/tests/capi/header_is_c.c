/* SPDX-License-Identifier: Apache-2.0 */

/* Compiled as C so the public header stays valid C. */

#include "dtcil/dtcil.h"

int dtcil_header_is_c(void) {
  dtcil_experiment* e = 0;
  dtcil_status st = dtcil_experiment_parse("{", &e);
  return st == DTCIL_ERR_CONFIG && e == 0;
}
