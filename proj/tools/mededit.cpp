#include "mededit/model.hpp"
int main(){return 0;}
