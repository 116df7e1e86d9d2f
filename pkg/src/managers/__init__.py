# Manager classes for business operations